//! Stock victim zoo for 32x32 RGB inputs.
//!
//! One training victim (fooling images are optimized against it), three
//! validation victims (transfer evaluation only) and one oracle architecture
//! that never appears in either zoo. Every network exposes three taps named
//! `relu_a`, `relu_b`, `relu_c` in its final convolutional stage.

use super::{ArchitectureSpec, LayerDesc, Tap};
use crate::victims::data::{IMAGE_SIDE, NUM_CLASSES};

fn conv(out: usize, kernel: usize, stride: usize, pad: usize) -> LayerDesc {
    LayerDesc::Conv {
        out,
        kernel,
        stride,
        pad,
    }
}

fn spec(name: &str, layers: Vec<LayerDesc>, taps: [usize; 3]) -> ArchitectureSpec {
    let arch = ArchitectureSpec {
        name: name.into(),
        input: (3, IMAGE_SIDE, IMAGE_SIDE),
        num_classes: NUM_CLASSES,
        layers,
        taps: vec![
            Tap { name: "relu_a".into(), layer: taps[0] },
            Tap { name: "relu_b".into(), layer: taps[1] },
            Tap { name: "relu_c".into(), layer: taps[2] },
        ],
    };
    arch.validate().expect("stock architecture must validate");
    arch
}

/// The victim fooling images are optimized against.
pub fn train_architecture() -> ArchitectureSpec {
    spec(
        "bedrock",
        vec![
            conv(12, 3, 1, 1), // 0
            LayerDesc::Relu,   // 1
            LayerDesc::MaxPool2, // 2 -> 16
            conv(24, 3, 1, 1), // 3
            LayerDesc::Relu,   // 4
            LayerDesc::MaxPool2, // 5 -> 8
            conv(32, 3, 1, 1), // 6
            LayerDesc::Relu,   // 7  relu_a
            conv(32, 3, 1, 1), // 8
            LayerDesc::Relu,   // 9  relu_b
            LayerDesc::MaxPool2, // 10 -> 4
            conv(48, 3, 1, 1), // 11
            LayerDesc::Relu,   // 12 relu_c
            LayerDesc::Flatten, // 13
            LayerDesc::Dense { out: NUM_CLASSES }, // 14
        ],
        [7, 9, 12],
    )
}

/// Transfer-evaluation victims; never used to generate fooling images.
pub fn validation_architectures() -> Vec<ArchitectureSpec> {
    vec![
        spec(
            "vee",
            vec![
                conv(16, 5, 2, 2), // 0 -> 16
                LayerDesc::Relu,   // 1
                conv(24, 3, 1, 1), // 2
                LayerDesc::Relu,   // 3
                LayerDesc::MaxPool2, // 4 -> 8
                conv(32, 3, 1, 1), // 5
                LayerDesc::Relu,   // 6  relu_a
                conv(32, 3, 1, 1), // 7
                LayerDesc::Relu,   // 8  relu_b
                LayerDesc::MaxPool2, // 9 -> 4
                conv(40, 3, 1, 1), // 10
                LayerDesc::Relu,   // 11 relu_c
                LayerDesc::Flatten,
                LayerDesc::Dense { out: NUM_CLASSES },
            ],
            [6, 8, 11],
        ),
        spec(
            "loopback",
            vec![
                conv(16, 3, 1, 1), // 0
                LayerDesc::Relu,   // 1
                LayerDesc::MaxPool2, // 2 -> 16
                conv(32, 3, 1, 1), // 3
                LayerDesc::Relu,   // 4
                LayerDesc::MaxPool2, // 5 -> 8
                LayerDesc::Residual { channels: 32 }, // 6 relu_a
                LayerDesc::Residual { channels: 32 }, // 7 relu_b
                LayerDesc::MaxPool2, // 8 -> 4
                conv(48, 3, 1, 1), // 9
                LayerDesc::Relu,   // 10 relu_c
                LayerDesc::Flatten,
                LayerDesc::Dense { out: NUM_CLASSES },
            ],
            [6, 7, 10],
        ),
        spec(
            "broadside",
            vec![
                conv(20, 7, 2, 3), // 0 -> 16
                LayerDesc::Relu,   // 1
                LayerDesc::MaxPool2, // 2 -> 8
                conv(36, 3, 1, 1), // 3
                LayerDesc::Relu,   // 4  relu_a
                conv(36, 3, 1, 1), // 5
                LayerDesc::Relu,   // 6  relu_b
                LayerDesc::MaxPool2, // 7 -> 4
                conv(52, 3, 1, 1), // 8
                LayerDesc::Relu,   // 9  relu_c
                LayerDesc::Flatten,
                LayerDesc::Dense { out: NUM_CLASSES },
            ],
            [4, 6, 9],
        ),
    ]
}

/// Everything above, training victim first.
pub fn stock_architectures() -> Vec<ArchitectureSpec> {
    let mut all = vec![train_architecture()];
    all.extend(validation_architectures());
    all
}

/// The black-box oracle's private architecture. Kept out of both zoos so
/// oracle transfer numbers measure genuine cross-model generalization.
pub fn oracle_architecture() -> ArchitectureSpec {
    spec(
        "sentinel",
        vec![
            conv(14, 3, 1, 1), // 0
            LayerDesc::Relu,   // 1
            LayerDesc::MaxPool2, // 2 -> 16
            conv(28, 5, 1, 2), // 3
            LayerDesc::Relu,   // 4
            LayerDesc::MaxPool2, // 5 -> 8
            conv(36, 3, 1, 1), // 6
            LayerDesc::Relu,   // 7  relu_a
            LayerDesc::Residual { channels: 36 }, // 8 relu_b
            LayerDesc::MaxPool2, // 9 -> 4
            conv(44, 3, 1, 1), // 10
            LayerDesc::Relu,   // 11 relu_c
            LayerDesc::Flatten,
            LayerDesc::Dense { out: NUM_CLASSES },
        ],
        [7, 8, 11],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_stock_architectures_validate() {
        for arch in stock_architectures() {
            arch.validate().unwrap();
            assert_eq!(arch.taps.len(), 3);
        }
        oracle_architecture().validate().unwrap();
    }

    #[test]
    fn zoo_names_are_unique_and_oracle_is_excluded() {
        let mut names: Vec<String> = stock_architectures()
            .into_iter()
            .map(|a| a.name)
            .collect();
        let oracle = oracle_architecture();
        assert!(!names.contains(&oracle.name));
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 4);
    }

    #[test]
    fn oracle_layer_stack_differs_from_every_zoo_member() {
        let oracle = oracle_architecture();
        for arch in stock_architectures() {
            assert_ne!(arch.layers, oracle.layers, "{} duplicates oracle", arch.name);
        }
    }

    #[test]
    fn taps_are_spatial_and_late() {
        for arch in stock_architectures() {
            for tap in &arch.taps {
                let (c, h, w) = arch.tap_shape(&tap.name).unwrap();
                assert!(c >= 16 && h >= 4 && w >= 4, "{}/{}", arch.name, tap.name);
            }
        }
    }
}

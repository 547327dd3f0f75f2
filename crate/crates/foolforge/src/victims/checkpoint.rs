//! Classifier checkpoints: architecture, labels and fingerprint in a TOML
//! header plus one tensor container per named parameter, all under the
//! archive's trailing checksum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_archive, write_archive, Archive};

use super::{ArchitectureSpec, Classifier, Fingerprint, VictimError};

const KIND: &str = "classifier";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchitectureSpec,
    class_names: Vec<String>,
    fingerprint: Fingerprint,
}

fn to_table<T: Serialize>(value: &T) -> Result<toml::Table, VictimError> {
    let text = toml::to_string(value).map_err(|e| VictimError::Checkpoint {
        msg: format!("header encode: {e}"),
    })?;
    toml::from_str(&text).map_err(|e| VictimError::Checkpoint {
        msg: format!("header re-parse: {e}"),
    })
}

pub fn save_classifier(classifier: &Classifier, path: &Path) -> Result<(), VictimError> {
    let layout = classifier.spec.param_layout()?;
    if layout.len() != classifier.params.len() {
        return Err(VictimError::Checkpoint {
            msg: format!(
                "classifier holds {} tensors, layout expects {}",
                classifier.params.len(),
                layout.len()
            ),
        });
    }
    let header = Header {
        arch: classifier.spec.clone(),
        class_names: classifier.class_names.clone(),
        fingerprint: classifier.fingerprint.clone(),
    };
    let mut archive = Archive::new(KIND, to_table(&header)?);
    for ((name, shape), tensor) in layout.iter().zip(&classifier.params) {
        if shape.as_slice() != tensor.shape() {
            return Err(VictimError::Checkpoint {
                msg: format!(
                    "layer {name}: tensor shape {:?} does not match layout {shape:?}",
                    tensor.shape()
                ),
            });
        }
        archive.push(name, tensor.clone());
    }
    write_archive(path, &archive)?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<Classifier, VictimError> {
    let archive = read_archive(path)?;
    if archive.kind != KIND {
        return Err(VictimError::Checkpoint {
            msg: format!("expected kind {KIND}, found {}", archive.kind),
        });
    }
    let header: Header =
        toml::Value::Table(archive.header.clone())
            .try_into()
            .map_err(|e| VictimError::Checkpoint {
                msg: format!("header decode: {e}"),
            })?;
    header.arch.validate()?;
    if header.class_names.len() != header.arch.num_classes {
        return Err(VictimError::Checkpoint {
            msg: format!(
                "{} class names for {} classes",
                header.class_names.len(),
                header.arch.num_classes
            ),
        });
    }
    let layout = header.arch.param_layout()?;
    let mut params = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let tensor = archive.tensor(name).ok_or_else(|| VictimError::Checkpoint {
            msg: format!("missing tensor for layer {name}"),
        })?;
        if tensor.shape() != shape.as_slice() {
            return Err(VictimError::Checkpoint {
                msg: format!(
                    "layer {name}: stored shape {:?} does not match architecture {shape:?}",
                    tensor.shape()
                ),
            });
        }
        params.push(tensor.clone());
    }
    Ok(Classifier {
        spec: header.arch,
        params,
        class_names: header.class_names,
        fingerprint: header.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victims::data::synthetic_dataset;
    use crate::victims::{train_classifier, LayerDesc, Tap, TrainConfig};

    fn trained() -> Classifier {
        let spec = ArchitectureSpec {
            name: "ckpt-test".into(),
            input: (3, 32, 32),
            num_classes: 10,
            layers: vec![
                LayerDesc::Conv { out: 4, kernel: 3, stride: 2, pad: 1 },
                LayerDesc::Relu,
                LayerDesc::MaxPool2,
                LayerDesc::Flatten,
                LayerDesc::Dense { out: 10 },
            ],
            taps: vec![Tap { name: "relu_a".into(), layer: 1 }],
        };
        let data = synthetic_dataset(11, 1, 1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 5,
            ..Default::default()
        };
        train_classifier(&spec, &data, &cfg).unwrap().0
    }

    #[test]
    fn round_trip_preserves_predictions_bit_exactly() {
        let c = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_classifier(&c, &path).unwrap();
        let back = load_classifier(&path).unwrap();
        assert_eq!(back.spec, c.spec);
        assert_eq!(back.fingerprint, c.fingerprint);
        let data = synthetic_dataset(12, 1, 1);
        let (batch, _) = data.val.batch(&[0, 3, 7]);
        let p1 = c.predict(&batch).unwrap();
        let p2 = back.predict(&batch).unwrap();
        assert_eq!(p1, p2, "reloaded predictions must be bit-identical");
    }

    #[test]
    fn fingerprint_floats_survive_exactly() {
        let mut c = trained();
        c.fingerprint.val_accuracy = 0.1 + 0.2; // deliberately non-round
        c.fingerprint.train_accuracy = 1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_classifier(&c, &path).unwrap();
        let back = load_classifier(&path).unwrap();
        assert_eq!(back.fingerprint.val_accuracy.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back.fingerprint.train_accuracy.to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn shape_mismatch_reports_the_layer_name() {
        let c = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_classifier(&c, &path).unwrap();
        // Rewrite the archive with one tensor swapped for a wrong shape.
        let mut archive = crate::tensor::read_archive(&path).unwrap();
        for (name, t) in archive.tensors.iter_mut() {
            if name == "l00.b" {
                *t = crate::tensor::Tensor::zeros(&[9]);
            }
        }
        crate::tensor::write_archive(&path, &archive).unwrap();
        let err = load_classifier(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("l00.b"), "error should name the layer: {msg}");
    }

    #[test]
    fn missing_tensor_reports_the_layer_name() {
        let c = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_classifier(&c, &path).unwrap();
        let mut archive = crate::tensor::read_archive(&path).unwrap();
        archive.tensors.retain(|(name, _)| name != "l04.w");
        crate::tensor::write_archive(&path, &archive).unwrap();
        let err = load_classifier(&path).unwrap_err();
        assert!(err.to_string().contains("l04.w"));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.ffa");
        let archive = Archive::new("something-else", toml::Table::new());
        write_archive(&path, &archive).unwrap();
        assert!(load_classifier(&path).is_err());
    }
}

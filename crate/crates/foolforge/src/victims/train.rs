//! Supervised training of victim classifiers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Optimizer, OptimizerConfig, TensorError};

use super::{ArchitectureSpec, Classifier, Dataset, DatasetSplit, Fingerprint, VictimError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(2e-3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Trains a fresh classifier on the dataset's train split. Deterministic in
/// (spec, dataset, config): shuffles, init and updates all derive from the
/// config seed.
pub fn train_classifier(
    spec: &ArchitectureSpec,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(Classifier, TrainReport), VictimError> {
    spec.validate()?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(VictimError::Arch {
            name: spec.name.clone(),
            msg: "epochs and batch_size must be positive".into(),
        });
    }
    if data.num_classes != spec.num_classes {
        return Err(VictimError::Dataset {
            msg: format!(
                "dataset has {} classes, architecture {} expects {}",
                data.num_classes, spec.name, spec.num_classes
            ),
        });
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(VictimError::Dataset {
            msg: "empty split".into(),
        });
    }
    if let Some(&bad) = data
        .train
        .labels
        .iter()
        .chain(&data.val.labels)
        .find(|&&l| l >= spec.num_classes)
    {
        return Err(VictimError::Dataset {
            msg: format!("label {bad} out of range"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = spec.init_params(&mut rng)?;
    let mut opt = Optimizer::new(config.optimizer);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut indices: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let (images, labels) = data.train.batch(chunk);
            let mut g = Graph::new();
            let input = g.input(images)?;
            let mut pids = Vec::with_capacity(params.len());
            for p in &params {
                pids.push(g.param(p.clone())?);
            }
            let trace = spec.build_forward(&mut g, input, &pids)?;
            let loss = g
                .cross_entropy(trace.logits, &labels)
                .map_err(|e| diverged(step, e))?;
            loss_sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward_params(loss).map_err(|e| diverged(step, e))?;
            let grad_refs: Vec<_> = pids
                .iter()
                .map(|&id| grads.wrt(id).cloned().unwrap_or_else(|| {
                    crate::tensor::Tensor::zeros(g.value(id).shape())
                }))
                .collect();
            let grad_borrow: Vec<&crate::tensor::Tensor> = grad_refs.iter().collect();
            let mut param_borrow: Vec<&mut crate::tensor::Tensor> = params.iter_mut().collect();
            opt.step(&mut param_borrow, &grad_borrow)
                .map_err(|e| diverged(step, e))?;
            step += 1;
        }
        epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
        });
    }

    let classifier = Classifier {
        spec: spec.clone(),
        params,
        class_names: data.class_names.clone(),
        fingerprint: Fingerprint {
            dataset_hash: data.hash.clone(),
            seed: config.seed,
            epochs: config.epochs,
            train_accuracy: 0.0,
            val_accuracy: 0.0,
        },
    };
    let train_accuracy = accuracy(&classifier, &data.train)?;
    let val_accuracy = accuracy(&classifier, &data.val)?;
    let mut classifier = classifier;
    classifier.fingerprint.train_accuracy = train_accuracy;
    classifier.fingerprint.val_accuracy = val_accuracy;
    Ok((
        classifier,
        TrainReport {
            epochs,
            train_accuracy,
            val_accuracy,
        },
    ))
}

fn diverged(step: usize, e: TensorError) -> VictimError {
    match e {
        TensorError::NonFinite { .. } | TensorError::NonFiniteGrad { .. } => {
            VictimError::Diverged {
                step,
                msg: e.to_string(),
            }
        }
        other => VictimError::Tensor(other),
    }
}

/// Top-1 accuracy over a split, evaluated in batches.
pub fn accuracy(classifier: &Classifier, split: &DatasetSplit) -> Result<f64, VictimError> {
    let mut correct = 0usize;
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(64) {
        let (images, labels) = split.batch(chunk);
        let predicted = classifier.predict_labels(&images)?;
        correct += predicted
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victims::data::synthetic_dataset;
    use crate::victims::{LayerDesc, Tap};

    fn micro_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            name: "micro".into(),
            input: (3, 32, 32),
            num_classes: 10,
            layers: vec![
                LayerDesc::Conv { out: 6, kernel: 3, stride: 2, pad: 1 },
                LayerDesc::Relu,
                LayerDesc::MaxPool2,
                LayerDesc::Conv { out: 10, kernel: 3, stride: 1, pad: 1 },
                LayerDesc::Relu,
                LayerDesc::MaxPool2,
                LayerDesc::Flatten,
                LayerDesc::Dense { out: 10 },
            ],
            taps: vec![Tap { name: "relu_a".into(), layer: 4 }],
        }
    }

    #[test]
    fn training_learns_better_than_chance_and_is_deterministic() {
        let data = synthetic_dataset(7, 6, 3);
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 10,
            optimizer: crate::tensor::OptimizerConfig::adam(5e-3),
            ..TrainConfig::default()
        };
        let (c1, r1) = train_classifier(&micro_spec(), &data, &cfg).unwrap();
        assert!(
            r1.train_accuracy > 0.5,
            "train accuracy {} not above chance",
            r1.train_accuracy
        );
        assert!(r1.epochs[1].mean_loss < r1.epochs[0].mean_loss);
        assert!(r1.epochs.last().unwrap().mean_loss < r1.epochs[0].mean_loss);
        let (c2, _) = train_classifier(&micro_spec(), &data, &cfg).unwrap();
        for (a, b) in c1.params.iter().zip(&c2.params) {
            assert_eq!(a, b, "training must be bit-deterministic");
        }
        assert_eq!(c1.fingerprint, c2.fingerprint);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let data = synthetic_dataset(7, 1, 1);
        let mut spec = micro_spec();
        spec.num_classes = 7;
        match spec.layers.last_mut() {
            Some(LayerDesc::Dense { out }) => *out = 7,
            _ => unreachable!(),
        }
        let err = train_classifier(&spec, &data, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("classes"));
    }

    #[test]
    fn fingerprint_records_dataset_and_seed() {
        let data = synthetic_dataset(3, 2, 1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            seed: 99,
            ..TrainConfig::default()
        };
        let (c, _) = train_classifier(&micro_spec(), &data, &cfg).unwrap();
        assert_eq!(c.fingerprint.dataset_hash, data.hash);
        assert_eq!(c.fingerprint.seed, 99);
        assert_eq!(c.fingerprint.epochs, 1);
    }
}

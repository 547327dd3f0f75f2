//! Transfer-net training against a frozen victim and a fixed
//! representation bank.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, Optimizer, OptimizerConfig};
use crate::victims::{Classifier, DatasetSplit};

use super::losses::{build_content_loss, build_mmd_loss};
use super::model::FtnModel;
use super::{FtnConfig, FtnError, RepresentationBank};

/// Loss readings at one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FtnStepStats {
    pub step: usize,
    pub l_c: f64,
    pub l_rep: f64,
    pub l_tv: f64,
    pub l_total: f64,
}

/// Per-step training record.
#[derive(Debug, Clone, Default)]
pub struct FtnReport {
    pub steps: Vec<FtnStepStats>,
}

impl FtnReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,l_c,l_rep,l_tv,l_total")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{},{}", s.step, s.l_c, s.l_rep, s.l_tv, s.l_total)?;
        }
        Ok(())
    }
}

/// Loss heads of one training step's graph.
pub(crate) struct BuiltLosses {
    pub total: NodeId,
    pub content: NodeId,
    pub repr: NodeId,
    pub tv: NodeId,
}

/// Builds net output and the weighted loss on an `[n, 3, h, w]` batch.
/// `bank_rows` must already be in the graph with the same row count as the
/// batch, matching the representation loss shape contract.
pub(crate) fn build_losses(
    g: &mut Graph,
    model: &FtnModel,
    victim: &Classifier,
    params: &[NodeId],
    input: NodeId,
    stats: NodeId,
    bank_rows: NodeId,
) -> Result<BuiltLosses, FtnError> {
    let out = model.build_forward(g, params, input, stats)?;
    let content = build_content_loss(g, out, input)?;
    let trace = victim.forward_frozen(g, out)?;
    let n = g.value(out).shape()[0];
    let mut phi: Option<NodeId> = None;
    for tap in &model.bank.taps {
        let node = trace.tap(&victim.spec, &tap.name).ok_or_else(|| FtnError::Bank {
            msg: format!("victim {} has no tap {}", victim.spec.name, tap.name),
        })?;
        let flat = g.reshape(node, &[n, tap.flat_len()])?;
        phi = Some(match phi {
            None => flat,
            Some(acc) => g.concat_cols(acc, flat)?,
        });
    }
    let phi = phi.expect("bank taps are nonempty");
    let repr = build_mmd_loss(g, bank_rows, phi)?;
    let tv = g.tv_loss(out)?;
    let weighted_rep = g.scale(repr, model.config.gamma)?;
    let weighted_tv = g.scale(tv, model.config.lambda)?;
    let partial = g.add(content, weighted_rep)?;
    let total = g.add(partial, weighted_tv)?;
    Ok(BuiltLosses { total, content, repr, tv })
}

fn check_binding(
    config: &FtnConfig,
    victim: &Classifier,
    bank: &RepresentationBank,
) -> Result<(), FtnError> {
    if bank.victim_name != victim.spec.name || bank.victim_fingerprint != victim.fingerprint {
        return Err(FtnError::Bank {
            msg: format!(
                "bank was built against {} but training victim is {}",
                bank.victim_name, victim.spec.name
            ),
        });
    }
    if bank.len() != config.n_samples {
        return Err(FtnError::Bank {
            msg: format!(
                "bank holds {} rows but n_samples is {}; batches must match the bank",
                bank.len(),
                config.n_samples
            ),
        });
    }
    let bank_taps: Vec<&str> = bank.taps.iter().map(|t| t.name.as_str()).collect();
    let cfg_taps: Vec<&str> = config.taps.iter().map(String::as_str).collect();
    if bank_taps != cfg_taps {
        return Err(FtnError::Bank {
            msg: format!("config taps {cfg_taps:?} differ from bank taps {bank_taps:?}"),
        });
    }
    Ok(())
}

/// Trains a fresh transfer net. The victim stays frozen; only the net's
/// own parameters move. Training consumes full batches of `n_samples`
/// images per step and drops any shorter tail.
pub fn train_ftn(
    config: &FtnConfig,
    victim: &Classifier,
    bank: RepresentationBank,
    data: &DatasetSplit,
) -> Result<(FtnModel, FtnReport), FtnError> {
    config.validate()?;
    check_binding(config, victim, &bank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FtnModel::init(config.clone(), victim.spec.input, bank, &mut rng)?;
    if data.len() < config.n_samples {
        return Err(FtnError::Config {
            msg: format!(
                "dataset has {} images, need at least one batch of {}",
                data.len(),
                config.n_samples
            ),
        });
    }
    let stats = model.stats_row()?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.learning_rate));
    let mut report = FtnReport::default();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks_exact(config.n_samples) {
            let (batch, _) = data.batch(chunk);
            model.check_batch(&batch)?;
            let mut g = Graph::new();
            let input = g.input(batch)?;
            let stats_id = g.input(stats.clone())?;
            let rows_id = g.input(model.bank.rows.clone())?;
            let mut pids = Vec::with_capacity(model.params.len());
            for p in &model.params {
                pids.push(g.param(p.clone())?);
            }
            let diverged = |msg: String| FtnError::Diverged { step, msg };
            let built = build_losses(&mut g, &model, victim, &pids, input, stats_id, rows_id)
                .map_err(|e| match e {
                    FtnError::Tensor(t) => diverged(t.to_string()),
                    other => other,
                })?;
            report.steps.push(FtnStepStats {
                step,
                l_c: g.value(built.content).data()[0],
                l_rep: g.value(built.repr).data()[0],
                l_tv: g.value(built.tv).data()[0],
                l_total: g.value(built.total).data()[0],
            });
            let grads = g
                .backward_params(built.total)
                .map_err(|e| diverged(e.to_string()))?;
            let grad_ts: Vec<_> = pids
                .iter()
                .map(|&id| grads.wrt_or_zeros(id, g.value(id).shape()))
                .collect();
            let grefs: Vec<&_> = grad_ts.iter().collect();
            let mut prefs: Vec<&mut _> = model.params.iter_mut().collect();
            opt.step(&mut prefs, &grefs)?;
            step += 1;
        }
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;
    use crate::victims::{DatasetSplit, Split};

    use super::super::model::tests::{tiny_config, tiny_model};
    use super::super::test_support::{fake_fooling, tiny_victim};
    use super::super::{build_representation_bank, FtnError};
    use super::*;

    fn tiny_split(n: usize, seed: u64) -> DatasetSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DatasetSplit {
            images: Tensor::random_uniform(&[n, 3, 12, 12], &mut rng, 0.0, 1.0),
            labels: (0..n).map(|i| i % 5).collect(),
            split: Split::Train,
        }
    }

    fn tiny_setup(epochs: usize, lr: f64) -> (FtnConfig, crate::victims::Classifier, RepresentationBank, DatasetSplit) {
        let victim = tiny_victim(3);
        let images = fake_fooling(&victim, 1, 2, 11);
        let bank = build_representation_bank(&victim, &images, &["relu_a"]).unwrap();
        let config = FtnConfig {
            epochs,
            learning_rate: lr,
            gamma: 0.5,
            lambda: 1e-4,
            ..tiny_config()
        };
        (config, victim, bank, tiny_split(4, 3))
    }

    #[test]
    fn training_reduces_the_total_loss() {
        let (config, victim, bank, data) = tiny_setup(8, 3e-3);
        let (_, report) = train_ftn(&config, &victim, bank, &data).unwrap();
        assert_eq!(report.steps.len(), 16);
        let first = report.steps.first().unwrap().l_total;
        let last = report.steps.last().unwrap().l_total;
        assert!(last < first, "loss did not improve: {first} -> {last}");
        assert!(report.steps.iter().all(|s| s.l_total.is_finite()));
        let s = &report.steps[0];
        let recomputed = s.l_c + config.gamma * s.l_rep + config.lambda * s.l_tv;
        assert!((s.l_total - recomputed).abs() < 1e-12);
    }

    #[test]
    fn victim_stays_frozen_during_training() {
        let (config, victim, bank, data) = tiny_setup(2, 3e-3);
        let before = victim.params.clone();
        train_ftn(&config, &victim, bank, &data).unwrap();
        assert_eq!(victim.params, before);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (config, victim, bank, data) = tiny_setup(2, 3e-3);
        let (m1, r1) = train_ftn(&config, &victim, bank.clone(), &data).unwrap();
        let (m2, r2) = train_ftn(&config, &victim, bank, &data).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(r1.steps, r2.steps);
    }

    #[test]
    fn every_parameter_earns_gradient_once_the_conditioner_is_live() {
        let mut model = tiny_model(5);
        let n = model.params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        model.params[n - 2] =
            Tensor::random_normal(model.params[n - 2].shape(), &mut rng, 0.0, 0.05);
        let victim = tiny_victim(3);
        let data = tiny_split(2, 9);
        let mut g = Graph::new();
        let input = g.input(data.images.clone()).unwrap();
        let stats_id = g.input(model.stats_row().unwrap()).unwrap();
        let rows_id = g.input(model.bank.rows.clone()).unwrap();
        let mut pids = Vec::new();
        for p in &model.params {
            pids.push(g.param(p.clone()).unwrap());
        }
        let built =
            build_losses(&mut g, &model, &victim, &pids, input, stats_id, rows_id).unwrap();
        let grads = g.backward_params(built.total).unwrap();
        let layout =
            FtnModel::param_layout(&model.config, model.input, model.bank.width()).unwrap();
        for (&id, (name, shape)) in pids.iter().zip(&layout) {
            let grad = grads.wrt_or_zeros(id, shape);
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "parameter {name} received no gradient"
            );
        }
    }

    #[test]
    fn mismatched_bank_binding_is_rejected() {
        let (config, victim, bank, data) = tiny_setup(1, 1e-3);
        let mut renamed = bank.clone();
        renamed.victim_name = "someone-else".into();
        let err = train_ftn(&config, &victim, renamed, &data).unwrap_err();
        assert!(err.to_string().contains("someone-else"));

        let mut wrong_taps = config.clone();
        wrong_taps.taps = vec!["relu_zz".into()];
        let err = train_ftn(&wrong_taps, &victim, bank.clone(), &data).unwrap_err();
        assert!(err.to_string().contains("taps"));

        let mut wrong_n = config.clone();
        wrong_n.n_samples = 3;
        let err = train_ftn(&wrong_n, &victim, bank, &data).unwrap_err();
        assert!(err.to_string().contains("n_samples"));
    }

    #[test]
    fn runaway_steps_are_reported_as_divergence() {
        let (mut config, victim, bank, data) = tiny_setup(4, 1e150);
        config.seed = 2;
        let err = train_ftn(&config, &victim, bank, &data).unwrap_err();
        match err {
            FtnError::Diverged { step, .. } => assert!(step >= 1),
            other => panic!("expected divergence, got {other}"),
        }
    }
}

//! Iterated sign-of-gradient targeted baseline and its distortion
//! calibration, the single-image comparison class for the transfer net.

use crate::tensor::Tensor;
use crate::victims::Classifier;

use super::metrics::rmsd;
use super::EvalError;

/// Targeted iterated FGSM: descends cross-entropy toward `target`, moving
/// `2.5 * epsilon / steps` per step along the gradient sign, clipped to the
/// epsilon ball around `sources` intersected with [0, 1].
pub fn baseline_fgsm_targeted(
    victim: &Classifier,
    sources: &Tensor,
    target: usize,
    epsilon: f64,
    steps: usize,
) -> Result<Tensor, EvalError> {
    if !(epsilon >= 0.0) || epsilon > 1.0 {
        return Err(EvalError::Config {
            msg: format!("epsilon {epsilon} outside [0, 1]"),
        });
    }
    if steps == 0 {
        return Err(EvalError::Config {
            msg: "fgsm needs at least one step".into(),
        });
    }
    if target >= victim.class_names.len() {
        return Err(EvalError::Config {
            msg: format!(
                "target {target} outside {} classes",
                victim.class_names.len()
            ),
        });
    }
    if epsilon == 0.0 {
        return Ok(sources.clone());
    }
    let n = sources.shape()[0];
    let labels = vec![target; n];
    let alpha = 2.5 * epsilon / steps as f64;
    let mut adv = sources.clone();
    for _ in 0..steps {
        let mut g = crate::tensor::Graph::new();
        let x = g.param(adv.clone())?;
        let trace = victim.forward_frozen(&mut g, x)?;
        let loss = g.cross_entropy(trace.logits, &labels)?;
        let grads = g.backward_params(loss)?;
        let grad = grads.wrt_or_zeros(x, adv.shape());
        let src = sources.data();
        for ((v, &gv), &s) in adv.data_mut().iter_mut().zip(grad.data()).zip(src) {
            let sign = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = (*v - alpha * sign)
                .clamp(s - epsilon, s + epsilon)
                .clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

/// FGSM output calibrated to a requested distortion, in the inputs' raw
/// units, found by bisecting epsilon.
#[derive(Debug, Clone)]
pub struct FgsmCalibration {
    pub adversarial: Tensor,
    pub epsilon: f64,
    /// Achieved distortion in raw units.
    pub rmsd: f64,
}

/// Bisects epsilon until the baseline's distortion is within `rel_tol` of
/// `target_rmsd` (raw units) or the iteration budget runs out; returns the
/// closest run either way.
pub fn fgsm_at_rmsd(
    victim: &Classifier,
    sources: &Tensor,
    target: usize,
    steps: usize,
    target_rmsd: f64,
    rel_tol: f64,
    max_iters: usize,
) -> Result<FgsmCalibration, EvalError> {
    if !(target_rmsd > 0.0) {
        return Err(EvalError::Config {
            msg: format!("target rmsd {target_rmsd} must be positive"),
        });
    }
    let mut lo = 0.0f64;
    let mut hi = (4.0 * target_rmsd).min(1.0);
    let mut best: Option<FgsmCalibration> = None;
    for _ in 0..max_iters.max(1) {
        let eps = 0.5 * (lo + hi);
        let adv = baseline_fgsm_targeted(victim, sources, target, eps, steps)?;
        let d = rmsd(&adv, sources)?;
        let closer = best
            .as_ref()
            .map(|b| (d - target_rmsd).abs() < (b.rmsd - target_rmsd).abs())
            .unwrap_or(true);
        if closer {
            best = Some(FgsmCalibration {
                adversarial: adv,
                epsilon: eps,
                rmsd: d,
            });
        }
        if (d - target_rmsd).abs() <= rel_tol * target_rmsd {
            break;
        }
        if d < target_rmsd {
            lo = eps;
        } else {
            hi = eps;
        }
    }
    Ok(best.expect("at least one bisection iteration"))
}

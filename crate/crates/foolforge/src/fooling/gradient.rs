//! Shared gradient-ascent driver for the four direct methods and the
//! gradient-optimized coordinate network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    AffineParams, Graph, NodeId, Optimizer, OptimizerConfig, SpectralParam, Tensor, TensorError,
};
use crate::victims::Classifier;

use super::cppn::CppnGenome;
use super::{clean_confidence, check_target, FoolingConfig, FoolingError, FoolingImage, TracePoint};

/// Spectral coefficients start this close to the flat gray image.
const SPECTRAL_INIT_AMPLITUDE: f64 = 0.01;

pub(crate) fn pixel_ascent(
    victim: &Classifier,
    cfg: &FoolingConfig,
    warped: bool,
) -> Result<FoolingImage, FoolingError> {
    check_target(victim, cfg)?;
    let (c, h, w) = victim.spec.input;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Tensor::random_uniform(&[1, c, h, w], &mut rng, 0.0, 1.0);
    run_ascent(
        victim,
        cfg,
        vec![init],
        |_, pids| Ok(pids[0]),
        |p| p.clamp_in_place(0.0, 1.0),
        warped,
        &mut rng,
    )
}

pub(crate) fn spectral_ascent(
    victim: &Classifier,
    cfg: &FoolingConfig,
    warped: bool,
) -> Result<FoolingImage, FoolingError> {
    check_target(victim, cfg)?;
    let (c, h, w) = victim.spec.input;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut param = SpectralParam::new(c, h, w)?;
    param.init_random(&mut rng, SPECTRAL_INIT_AMPLITUDE);
    run_ascent(
        victim,
        cfg,
        vec![param.theta().clone()],
        |g, pids| {
            let pre = g.spectral(pids[0], h, w)?;
            let pre4 = g.reshape(pre, &[1, c, h, w])?;
            g.sigmoid(pre4)
        },
        |_| {},
        warped,
        &mut rng,
    )
}

pub(crate) fn cppn_ascent(
    victim: &Classifier,
    cfg: &FoolingConfig,
) -> Result<FoolingImage, FoolingError> {
    check_target(victim, cfg)?;
    let (c, h, w) = victim.spec.input;
    if c != 3 {
        return Err(FoolingError::Config {
            msg: format!("coordinate network renders 3 channels, victim wants {c}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let genome = CppnGenome::random(&mut rng, &CppnGenome::DEFAULT_HIDDEN);
    let params = genome.param_tensors();
    run_ascent(
        victim,
        cfg,
        params,
        |g, pids| genome.build_render(g, pids, h, w),
        |_| {},
        false,
        &mut rng,
    )
}

/// One Adam ascent loop over an arbitrary differentiable parameterization.
///
/// `build` maps the current parameter nodes to a `[1, c, h, w]` image in
/// [0, 1]; `project` is applied to every parameter after each update. When
/// `warped`, a fresh affine transform is sampled per step and applied
/// before the victim; degenerate ranges consume no randomness, which keeps
/// warped and unwarped runs bit-identical in that case.
fn run_ascent<F, P>(
    victim: &Classifier,
    cfg: &FoolingConfig,
    mut params: Vec<Tensor>,
    build: F,
    project: P,
    warped: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FoolingImage, FoolingError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
    P: Fn(&mut Tensor),
{
    let (c, h, w) = victim.spec.input;
    let synth = |params: &[Tensor]| -> Result<Tensor, FoolingError> {
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(params.len());
        for p in params {
            ids.push(g.input(p.clone())?);
        }
        let img = build(&mut g, &ids)?;
        Ok(g.value(img).reshaped(&[c, h, w])?)
    };

    let init_image = synth(&params)?;
    let init_confidence = clean_confidence(victim, &init_image, cfg.target)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.learning_rate));
    let mut trace = Vec::with_capacity(cfg.steps.min(4096));

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let mut pids = Vec::with_capacity(params.len());
        for p in &params {
            pids.push(g.param(p.clone())?);
        }
        let img = build(&mut g, &pids)?;
        let fed = if warped {
            let t = AffineParams::sample(rng, cfg.rot_deg, cfg.scale, cfg.jitter_px)?;
            g.warp(img, t)?
        } else {
            img
        };
        let forward = victim.forward_frozen(&mut g, fed)?;
        let loss = g.cross_entropy(forward.logits, &[cfg.target])?;
        let loss_value = g.value(loss).item();
        let confidence = (-loss_value).exp();
        trace.push(TracePoint { step, loss: loss_value, confidence });

        let grads = g.backward_params(loss)?;
        let grad_values: Vec<Tensor> = pids
            .iter()
            .map(|&id| grads.wrt_or_zeros(id, g.value(id).shape()))
            .collect();
        let grad_refs: Vec<&Tensor> = grad_values.iter().collect();
        let mut param_refs: Vec<&mut Tensor> = params.iter_mut().collect();
        opt.step(&mut param_refs, &grad_refs)?;
        for p in params.iter_mut() {
            project(p);
        }

        if let Some(stop) = cfg.stop_confidence {
            if confidence >= stop {
                let candidate = synth(&params)?;
                if clean_confidence(victim, &candidate, cfg.target)? >= stop {
                    break;
                }
            }
        }
    }

    let final_image = synth(&params)?;
    let final_confidence = clean_confidence(victim, &final_image, cfg.target)?;
    let (image, confidence) = if final_confidence >= init_confidence {
        (final_image, final_confidence)
    } else {
        (init_image, init_confidence)
    };
    Ok(FoolingImage {
        image,
        method: cfg.method,
        target: cfg.target,
        confidence,
        trace,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::tiny_victim;
    use super::super::{fool_dr, fool_naive, fool_tr, fool_trdr, FoolingConfig, FoolingMethod};

    fn short(method: FoolingMethod, steps: usize) -> FoolingConfig {
        FoolingConfig {
            steps,
            stop_confidence: None,
            ..FoolingConfig::for_method(method, 2, 11)
        }
    }

    #[test]
    fn naive_ascent_improves_confidence_and_stays_in_bounds() {
        let victim = tiny_victim(4);
        let out = fool_naive(&victim, &short(FoolingMethod::Naive, 40)).unwrap();
        assert_eq!(out.image.shape(), &[3, 12, 12]);
        assert_eq!(out.trace.len(), 40);
        assert!(out.confidence > out.trace[0].confidence);
        assert!(out.confidence > 0.5, "confidence {}", out.confidence);
        assert!(out
            .image
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn naive_is_deterministic_in_the_seed() {
        let victim = tiny_victim(4);
        let a = fool_naive(&victim, &short(FoolingMethod::Naive, 6)).unwrap();
        let b = fool_naive(&victim, &short(FoolingMethod::Naive, 6)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.confidence.to_bits(), b.confidence.to_bits());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    #[test]
    fn degenerate_tr_matches_naive_bit_for_bit() {
        let victim = tiny_victim(4);
        let naive = fool_naive(&victim, &short(FoolingMethod::Naive, 8)).unwrap();
        let cfg = FoolingConfig {
            rot_deg: 0.0,
            scale: (1.0, 1.0),
            jitter_px: 0.0,
            ..short(FoolingMethod::Tr, 8)
        };
        let tr = fool_tr(&victim, &cfg).unwrap();
        assert_eq!(naive.image, tr.image);
        assert_eq!(naive.confidence.to_bits(), tr.confidence.to_bits());
        for (x, y) in naive.trace.iter().zip(&tr.trace) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    #[test]
    fn degenerate_trdr_matches_dr_bit_for_bit() {
        let victim = tiny_victim(9);
        let dr = fool_dr(&victim, &short(FoolingMethod::Dr, 8)).unwrap();
        let cfg = FoolingConfig {
            rot_deg: 0.0,
            scale: (1.0, 1.0),
            jitter_px: 0.0,
            ..short(FoolingMethod::TrDr, 8)
        };
        let trdr = fool_trdr(&victim, &cfg).unwrap();
        assert_eq!(dr.image, trdr.image);
        assert_eq!(dr.confidence.to_bits(), trdr.confidence.to_bits());
    }

    #[test]
    fn spectral_ascent_improves_confidence() {
        let victim = tiny_victim(4);
        let out = fool_dr(&victim, &short(FoolingMethod::Dr, 40)).unwrap();
        assert!(out.confidence > out.trace[0].confidence);
        assert!(out
            .image
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn final_confidence_matches_a_fresh_prediction_bit_for_bit() {
        let victim = tiny_victim(4);
        let out = fool_naive(&victim, &short(FoolingMethod::Naive, 12)).unwrap();
        let batch = out.image.reshaped(&[1, 3, 12, 12]).unwrap();
        let fresh = victim.predict(&batch).unwrap().data()[out.target];
        assert_eq!(out.confidence.to_bits(), fresh.to_bits());
    }

    #[test]
    fn early_stop_truncates_the_trace() {
        let victim = tiny_victim(4);
        let cfg = FoolingConfig {
            steps: 400,
            stop_confidence: Some(0.9),
            ..FoolingConfig::for_method(FoolingMethod::Naive, 2, 11)
        };
        let out = fool_naive(&victim, &cfg).unwrap();
        assert!(out.trace.len() < 400, "stopped after {} steps", out.trace.len());
        assert!(out.confidence >= 0.9);
    }
}

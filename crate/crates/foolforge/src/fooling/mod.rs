//! Fooling-image generation.
//!
//! Six strategies synthesize images that a frozen victim classifies as a
//! chosen target with high confidence: unconstrained pixel ascent, ascent
//! under random affine transformations, ascent in a scaled Fourier basis,
//! the combination of the last two, and two coordinate-network routes
//! (gradient-optimized and evolved). Every generator is a pure function of
//! (victim, config): all randomness derives from the config seed.

mod cppn;
mod gradient;
mod spectrum;
mod store;

pub use cppn::{coordinate_map, CppnActivation, CppnGenome, CppnLayer};
pub use spectrum::high_freq_energy;
pub use store::{export_png, load_fooling_image, save_fooling_image};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};
use crate::victims::{Classifier, VictimError};

#[derive(Debug, thiserror::Error)]
pub enum FoolingError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error("fooling config: {msg}")]
    Config { msg: String },
    #[error("fooling store: {msg}")]
    Store { msg: String },
}

/// Generation strategy. String forms are the snake_case names used in
/// config files, report rows and file sidecars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoolingMethod {
    Naive,
    Tr,
    Dr,
    #[serde(rename = "trdr")]
    TrDr,
    CppnGrad,
    CppnEa,
}

impl FoolingMethod {
    pub const ALL: [FoolingMethod; 6] = [
        FoolingMethod::Naive,
        FoolingMethod::Tr,
        FoolingMethod::Dr,
        FoolingMethod::TrDr,
        FoolingMethod::CppnGrad,
        FoolingMethod::CppnEa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FoolingMethod::Naive => "naive",
            FoolingMethod::Tr => "tr",
            FoolingMethod::Dr => "dr",
            FoolingMethod::TrDr => "trdr",
            FoolingMethod::CppnGrad => "cppn_grad",
            FoolingMethod::CppnEa => "cppn_ea",
        }
    }

    /// Methods that constrain high-frequency content, in contrast to the
    /// unconstrained pixel ascent.
    pub fn is_low_frequency(self) -> bool {
        self != FoolingMethod::Naive
    }
}

impl fmt::Display for FoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FoolingMethod {
    type Err = FoolingError;

    fn from_str(s: &str) -> Result<Self, FoolingError> {
        FoolingMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FoolingError::Config {
                msg: format!("unknown fooling method {s:?}"),
            })
    }
}

/// Knobs for one generation run. `steps` counts optimizer steps for the
/// gradient methods and generations for the evolutionary one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoolingConfig {
    pub method: FoolingMethod,
    pub target: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Rotation range in degrees, symmetric about zero.
    pub rot_deg: f64,
    /// Scale range; must contain 1 so the identity stays reachable.
    pub scale: (f64, f64),
    /// Translation jitter in pixels, symmetric about zero.
    pub jitter_px: f64,
    pub population: usize,
    pub elites: usize,
    pub mutation_sigma: f64,
    /// Per-offspring probability of growing one hidden unit.
    pub structural_rate: f64,
    /// Stop early once the objective and the clean image both reach this
    /// confidence. `None` always runs the full budget.
    pub stop_confidence: Option<f64>,
    pub seed: u64,
}

impl FoolingConfig {
    /// Defaults for a method: 512 steps, lr 0.05 on pixels and spectra,
    /// lr 0.01 on coordinate-network weights, rotation within 5 degrees,
    /// scale in [0.9, 1.1], jitter within 2 px, population 32 with 8 elites.
    pub fn for_method(method: FoolingMethod, target: usize, seed: u64) -> Self {
        let learning_rate = match method {
            FoolingMethod::CppnGrad => 0.01,
            _ => 0.05,
        };
        Self {
            method,
            target,
            steps: 512,
            learning_rate,
            rot_deg: 5.0,
            scale: (0.9, 1.1),
            jitter_px: 2.0,
            population: 32,
            elites: 8,
            mutation_sigma: 0.1,
            structural_rate: 0.05,
            stop_confidence: Some(0.999),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), FoolingError> {
        let fail = |msg: String| Err(FoolingError::Config { msg });
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("bad learning rate {}", self.learning_rate));
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= 1.0 && self.scale.1 >= 1.0) {
            return fail(format!("scale range {:?} must contain 1", self.scale));
        }
        if self.rot_deg < 0.0 || self.jitter_px < 0.0 {
            return fail("rotation and jitter ranges must be nonnegative".into());
        }
        if self.population == 0 || self.elites == 0 || self.elites > self.population {
            return fail(format!(
                "need 0 < elites <= population, got {}/{}",
                self.elites, self.population
            ));
        }
        if self.mutation_sigma < 0.0 {
            return fail("mutation sigma must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.structural_rate) {
            return fail(format!("structural rate {} outside [0, 1]", self.structural_rate));
        }
        if let Some(c) = self.stop_confidence {
            if !(0.0..=1.0).contains(&c) {
                return fail(format!("stop confidence {c} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One step (or generation) of the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Negative log target probability of the optimized objective.
    pub loss: f64,
    /// Target probability of the optimized objective at this step.
    pub confidence: f64,
}

/// A finished fooling image plus its provenance. `confidence` always equals
/// `predict(victim, image)[target]` recomputed from scratch.
#[derive(Debug, Clone)]
pub struct FoolingImage {
    /// `[c, h, w]` image in [0, 1].
    pub image: Tensor,
    pub method: FoolingMethod,
    pub target: usize,
    pub confidence: f64,
    pub trace: Vec<TracePoint>,
    pub seed: u64,
}

/// Runs the generator selected by `cfg.method`.
pub fn generate(victim: &Classifier, cfg: &FoolingConfig) -> Result<FoolingImage, FoolingError> {
    match cfg.method {
        FoolingMethod::Naive => fool_naive(victim, cfg),
        FoolingMethod::Tr => fool_tr(victim, cfg),
        FoolingMethod::Dr => fool_dr(victim, cfg),
        FoolingMethod::TrDr => fool_trdr(victim, cfg),
        FoolingMethod::CppnGrad => fool_cppn_grad(victim, cfg),
        FoolingMethod::CppnEa => fool_cppn_ea(victim, cfg),
    }
}

/// Unconstrained ascent on raw pixels with a [0, 1] projection each step.
pub fn fool_naive(victim: &Classifier, cfg: &FoolingConfig) -> Result<FoolingImage, FoolingError> {
    check_method(cfg, FoolingMethod::Naive)?;
    gradient::pixel_ascent(victim, cfg, false)
}

/// Pixel ascent through a freshly sampled affine warp each step. Degenerate
/// ranges reproduce [`fool_naive`] bit for bit on the same seed.
pub fn fool_tr(victim: &Classifier, cfg: &FoolingConfig) -> Result<FoolingImage, FoolingError> {
    check_method(cfg, FoolingMethod::Tr)?;
    gradient::pixel_ascent(victim, cfg, true)
}

/// Ascent on spectral coefficients through the scaled Fourier synthesis.
pub fn fool_dr(victim: &Classifier, cfg: &FoolingConfig) -> Result<FoolingImage, FoolingError> {
    check_method(cfg, FoolingMethod::Dr)?;
    gradient::spectral_ascent(victim, cfg, false)
}

/// Spectral ascent through a random affine warp each step. Degenerate
/// ranges reproduce [`fool_dr`] bit for bit on the same seed.
pub fn fool_trdr(victim: &Classifier, cfg: &FoolingConfig) -> Result<FoolingImage, FoolingError> {
    check_method(cfg, FoolingMethod::TrDr)?;
    gradient::spectral_ascent(victim, cfg, true)
}

/// Gradient ascent on coordinate-network weights through the renderer.
pub fn fool_cppn_grad(
    victim: &Classifier,
    cfg: &FoolingConfig,
) -> Result<FoolingImage, FoolingError> {
    check_method(cfg, FoolingMethod::CppnGrad)?;
    gradient::cppn_ascent(victim, cfg)
}

/// Evolves coordinate-network genomes with elitist truncation selection.
pub fn fool_cppn_ea(
    victim: &Classifier,
    cfg: &FoolingConfig,
) -> Result<FoolingImage, FoolingError> {
    check_method(cfg, FoolingMethod::CppnEa)?;
    cppn::evolve(victim, cfg)
}

/// Mean target probability of `image` under `n` random affine warps drawn
/// with the config's ranges from the given seed.
pub fn expected_confidence_over_transforms(
    victim: &Classifier,
    image: &Tensor,
    cfg: &FoolingConfig,
    n: usize,
    seed: u64,
) -> Result<f64, FoolingError> {
    use rand::SeedableRng;
    if n == 0 {
        return Err(FoolingError::Config {
            msg: "need at least one transform sample".into(),
        });
    }
    let (c, h, w) = victim.spec.input;
    let batch = image.reshaped(&[1, c, h, w])?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..n {
        let params =
            crate::tensor::AffineParams::sample(&mut rng, cfg.rot_deg, cfg.scale, cfg.jitter_px)?;
        let warped = crate::tensor::warp_bilinear(&batch, &params);
        sum += victim.predict(&warped)?.data()[cfg.target];
    }
    Ok(sum / n as f64)
}

fn check_method(cfg: &FoolingConfig, expected: FoolingMethod) -> Result<(), FoolingError> {
    cfg.validate()?;
    if cfg.method != expected {
        return Err(FoolingError::Config {
            msg: format!("config is for {}, generator is {}", cfg.method, expected),
        });
    }
    Ok(())
}

/// Validates the config against a concrete victim and returns the target
/// probability of a clean `[c, h, w]` image.
pub(crate) fn clean_confidence(
    victim: &Classifier,
    image: &Tensor,
    target: usize,
) -> Result<f64, FoolingError> {
    let (c, h, w) = victim.spec.input;
    let batch = image.reshaped(&[1, c, h, w])?;
    let probs = victim.predict(&batch)?;
    Ok(probs.data()[target])
}

pub(crate) fn check_target(victim: &Classifier, cfg: &FoolingConfig) -> Result<(), FoolingError> {
    if cfg.target >= victim.spec.num_classes {
        return Err(FoolingError::Config {
            msg: format!(
                "target {} out of range for {} classes",
                cfg.target, victim.spec.num_classes
            ),
        });
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in FoolingMethod::ALL {
            assert_eq!(m.as_str().parse::<FoolingMethod>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("fgsm".parse::<FoolingMethod>().is_err());
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = FoolingConfig::for_method(FoolingMethod::Tr, 0, 1);
        assert!(cfg.validate().is_ok());
        cfg.scale = (1.1, 1.2);
        assert!(cfg.validate().is_err(), "scale range must contain 1");
        cfg.scale = (0.9, 1.1);
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        cfg.steps = 8;
        cfg.elites = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generator_rejects_mismatched_method() {
        let victim = test_support::tiny_victim(0);
        let cfg = FoolingConfig::for_method(FoolingMethod::Dr, 1, 3);
        let err = fool_naive(&victim, &cfg).unwrap_err();
        assert!(err.to_string().contains("naive"));
    }

    #[test]
    fn target_out_of_range_is_rejected() {
        let victim = test_support::tiny_victim(0);
        let mut cfg = FoolingConfig::for_method(FoolingMethod::Naive, 99, 3);
        cfg.steps = 1;
        let err = generate(&victim, &cfg).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }
}

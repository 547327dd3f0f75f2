//! The fooling transfer net: a conditional encoder/decoder that maps source
//! images to adversarial examples whose victim-internal representations
//! match a bank of fooling-image activations.

mod checkpoint;
mod losses;
mod model;
mod train;

pub use checkpoint::{load_ftn, save_ftn};
pub use losses::{
    build_content_loss, build_mmd_loss, build_ssim_mean, loss_content, loss_mmd, loss_total,
    loss_tv, SSIM_C1, SSIM_C2, SSIM_WINDOW,
};
pub use model::{FtnModel, ADAIN_EPS};
pub use train::{train_ftn, FtnReport, FtnStepStats};

use serde::{Deserialize, Serialize};

use crate::fooling::FoolingImage;
use crate::tensor::{Tensor, TensorError};
use crate::victims::{Classifier, Fingerprint, VictimError};

#[derive(Debug, thiserror::Error)]
pub enum FtnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error("ftn config: {msg}")]
    Config { msg: String },
    #[error("representation bank: {msg}")]
    Bank { msg: String },
    #[error("ftn training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
    #[error("ftn checkpoint: {msg}")]
    Checkpoint { msg: String },
}

/// Hyperparameters of the transfer net. The decoder always carries exactly
/// three conditioned residual blocks; training batches are exactly
/// `n_samples` wide so generated and bank representations stay comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtnConfig {
    /// Channel widths after the two strided encoder convolutions.
    pub enc_channels: (usize, usize),
    pub enc_residual_blocks: usize,
    /// Conditioned decoder blocks; must stay 3.
    pub adain_blocks: usize,
    pub mlp_hidden: usize,
    /// Victim taps whose activations make up representation rows.
    pub taps: Vec<String>,
    /// Bank size and training batch size.
    pub n_samples: usize,
    /// Representation loss weight.
    pub gamma: f64,
    /// Total-variance loss weight.
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FtnConfig {
    fn default() -> Self {
        Self {
            enc_channels: (32, 64),
            enc_residual_blocks: 2,
            adain_blocks: 3,
            mlp_hidden: 128,
            taps: vec!["relu_a".into(), "relu_b".into(), "relu_c".into()],
            n_samples: 8,
            gamma: 0.5,
            lambda: 1e-4,
            epochs: 2,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl FtnConfig {
    pub fn validate(&self) -> Result<(), FtnError> {
        let fail = |msg: String| Err(FtnError::Config { msg });
        if self.adain_blocks != 3 {
            return fail(format!(
                "decoder carries exactly 3 conditioned blocks, got {}",
                self.adain_blocks
            ));
        }
        if self.enc_channels.0 == 0 || self.enc_channels.1 == 0 || self.mlp_hidden == 0 {
            return fail("zero-width layer".into());
        }
        if self.taps.is_empty() {
            return fail("need at least one tap".into());
        }
        if self.n_samples == 0 || self.epochs == 0 {
            return fail("n_samples and epochs must be positive".into());
        }
        if self.gamma < 0.0 || self.lambda < 0.0 {
            return fail(format!("loss weights {}/{} must be nonnegative", self.gamma, self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("bad learning rate {}", self.learning_rate));
        }
        Ok(())
    }

    /// Total conditioned channels across all decoder blocks, two
    /// normalization layers per block.
    pub fn adain_channels_total(&self) -> usize {
        self.adain_blocks * 2 * self.enc_channels.1
    }
}

/// Shape of one tap's activation volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapInfo {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TapInfo {
    pub fn flat_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Flattened tap activations of sampled fooling images in a frozen victim.
/// Rows supervise the transfer net's representation loss.
#[derive(Debug, Clone)]
pub struct RepresentationBank {
    /// `[n, d]`, one row per fooling image.
    pub rows: Tensor,
    pub image_ids: Vec<String>,
    pub taps: Vec<TapInfo>,
    pub target: usize,
    pub victim_name: String,
    pub victim_fingerprint: Fingerprint,
}

impl RepresentationBank {
    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature width `d`, the sum of flattened tap volumes.
    pub fn width(&self) -> usize {
        self.rows.shape()[1]
    }

    /// Per-feature mean then population variance across rows, concatenated
    /// into a `[2d]` vector; the conditioning input of the transfer net.
    pub fn stats(&self) -> Tensor {
        let (n, d) = (self.len(), self.width());
        let data = self.rows.data();
        let mut out = vec![0.0; 2 * d];
        for j in 0..d {
            let mut mean = 0.0;
            for i in 0..n {
                mean += data[i * d + j];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let dv = data[i * d + j] - mean;
                var += dv * dv;
            }
            out[j] = mean;
            out[d + j] = var / n as f64;
        }
        Tensor::new(&[2 * d], out).expect("stats vector")
    }
}

/// Extracts and flattens tap activations for each fooling image. All images
/// must share one target class, and the taps must exist on the victim.
pub fn build_representation_bank(
    victim: &Classifier,
    images: &[FoolingImage],
    taps: &[&str],
) -> Result<RepresentationBank, FtnError> {
    if images.is_empty() {
        return Err(FtnError::Bank {
            msg: "need at least one fooling image".into(),
        });
    }
    if taps.is_empty() {
        return Err(FtnError::Bank {
            msg: "need at least one tap".into(),
        });
    }
    let target = images[0].target;
    if let Some(bad) = images.iter().find(|f| f.target != target) {
        return Err(FtnError::Bank {
            msg: format!(
                "mixed target classes: {} and {}",
                target, bad.target
            ),
        });
    }
    let mut infos = Vec::with_capacity(taps.len());
    for name in taps {
        let (c, h, w) = victim.spec.tap_shape(name)?;
        infos.push(TapInfo {
            name: (*name).to_string(),
            channels: c,
            height: h,
            width: w,
        });
    }
    let d: usize = infos.iter().map(TapInfo::flat_len).sum();
    let (ic, ih, iw) = victim.spec.input;

    let mut rows = Vec::with_capacity(images.len() * d);
    let mut ids = Vec::with_capacity(images.len());
    for (idx, img) in images.iter().enumerate() {
        let batch = img.image.reshaped(&[1, ic, ih, iw])?;
        let acts = victim.activations_at(&batch, taps)?;
        for a in &acts {
            rows.extend_from_slice(a.data());
        }
        ids.push(format!("{}-s{}-{}", img.method, img.seed, idx));
    }
    Ok(RepresentationBank {
        rows: Tensor::new(&[images.len(), d], rows)?,
        image_ids: ids,
        taps: infos,
        target,
        victim_name: victim.spec.name.clone(),
        victim_fingerprint: victim.fingerprint.clone(),
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use rand::SeedableRng;

    use crate::fooling::{FoolingImage, FoolingMethod};
    use crate::tensor::Tensor;
    use crate::victims::Classifier;

    pub use crate::fooling::test_support::tiny_victim;

    /// Random in-bounds images labeled as fooling output for bank tests.
    pub fn fake_fooling(victim: &Classifier, target: usize, n: usize, seed: u64) -> Vec<FoolingImage> {
        let (c, h, w) = victim.spec.input;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| FoolingImage {
                image: Tensor::random_uniform(&[c, h, w], &mut rng, 0.0, 1.0),
                method: FoolingMethod::Dr,
                target,
                confidence: 0.5,
                trace: Vec::new(),
                seed: seed + i as u64,
            })
            .collect()
    }
}

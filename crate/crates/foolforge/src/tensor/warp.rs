//! Affine warps with bilinear resampling and edge padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::dims4;
use super::{Tensor, TensorError};

/// Rotation (radians) about the image center, isotropic scale and pixel
/// translation, applied as `dst = R(rot) . scale . (src - c) + c + jitter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub scale: f64,
    pub jitter: (f64, f64),
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            jitter: (0.0, 0.0),
        }
    }

    pub fn new(rotation: f64, scale: f64, jitter: (f64, f64)) -> Result<Self, TensorError> {
        if !(rotation.is_finite() && scale.is_finite() && jitter.0.is_finite() && jitter.1.is_finite())
        {
            return Err(TensorError::Invalid {
                op: "affine_params",
                msg: "parameters must be finite".into(),
            });
        }
        if scale <= 0.0 {
            return Err(TensorError::Invalid {
                op: "affine_params",
                msg: format!("scale must be positive, got {scale}"),
            });
        }
        Ok(Self {
            rotation,
            scale,
            jitter,
        })
    }

    /// Uniform draw from symmetric ranges. Degenerate ranges consume no
    /// randomness for that component, so all-degenerate ranges produce the
    /// identity while leaving the RNG stream untouched.
    pub fn sample(
        rng: &mut impl Rng,
        rot_deg: f64,
        scale_range: (f64, f64),
        jitter_px: f64,
    ) -> Result<Self, TensorError> {
        if scale_range.0 > scale_range.1 || scale_range.0 <= 0.0 {
            return Err(TensorError::Invalid {
                op: "affine_params",
                msg: format!("bad scale range {scale_range:?}"),
            });
        }
        let rotation = if rot_deg > 0.0 {
            rng.random_range(-rot_deg..rot_deg).to_radians()
        } else {
            0.0
        };
        let scale = if scale_range.0 < scale_range.1 {
            rng.random_range(scale_range.0..scale_range.1)
        } else {
            scale_range.0
        };
        let jitter = if jitter_px > 0.0 {
            (
                rng.random_range(-jitter_px..jitter_px),
                rng.random_range(-jitter_px..jitter_px),
            )
        } else {
            (0.0, 0.0)
        };
        Self::new(rotation, scale, jitter)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && self.jitter == (0.0, 0.0)
    }
}

/// Inverse-maps an output pixel to its source location.
#[inline]
fn source_of(p: &AffineParams, cx: f64, cy: f64, ox: f64, oy: f64) -> (f64, f64) {
    let ux = (ox - cx - p.jitter.0) / p.scale;
    let uy = (oy - cy - p.jitter.1) / p.scale;
    let (sin, cos) = p.rotation.sin_cos();
    (cos * ux + sin * uy + cx, -sin * ux + cos * uy + cy)
}

/// Applies an affine warp to an NCHW batch with bilinear sampling.
pub fn warp_bilinear(x: &Tensor, p: &AffineParams) -> Tensor {
    if p.is_identity() {
        return x.clone();
    }
    let (n, c, h, w) = dims4(x);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for img in 0..n * c {
        let xin = &x.data()[img * h * w..][..h * w];
        let oimg = &mut od[img * h * w..][..h * w];
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = source_of(p, cx, cy, ox as f64, oy as f64);
                let mut acc = 0.0;
                for (idx, wgt) in super::kernels::bilinear_taps(sy, sx, h, w) {
                    acc += wgt * xin[idx];
                }
                oimg[oy * w + ox] = acc;
            }
        }
    }
    out
}

/// Gradient of [`warp_bilinear`] w.r.t. the input image.
pub fn warp_bilinear_grad(g: &Tensor, p: &AffineParams) -> Tensor {
    if p.is_identity() {
        return g.clone();
    }
    let (n, c, h, w) = dims4(g);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut dx = Tensor::zeros(g.shape());
    let dd = dx.data_mut();
    for img in 0..n * c {
        let gimg = &g.data()[img * h * w..][..h * w];
        let dimg = &mut dd[img * h * w..][..h * w];
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = source_of(p, cx, cy, ox as f64, oy as f64);
                let gv = gimg[oy * w + ox];
                for (idx, wgt) in super::kernels::bilinear_taps(sy, sx, h, w) {
                    dimg[idx] += wgt * gv;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_params_return_input_bit_exact() {
        let x = Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64).sin());
        let y = warp_bilinear(&x, &AffineParams::identity());
        assert_eq!(x, y);
    }

    #[test]
    fn unit_jitter_shifts_one_column() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let p = AffineParams::new(0.0, 1.0, (1.0, 0.0)).unwrap();
        let y = warp_bilinear(&x, &p);
        assert_eq!(y.at4(0, 0, 2, 3), 1.0);
        assert_eq!(y.at4(0, 0, 2, 2), 0.0);
    }

    #[test]
    fn quarter_turn_moves_mass_consistently() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 4] = 1.0;
        let p = AffineParams::new(std::f64::consts::FRAC_PI_2, 1.0, (0.0, 0.0)).unwrap();
        let y = warp_bilinear(&x, &p);
        // Forward quarter turn sends (4, 2) -> (2, 4); row 4 col 2 holds it.
        assert!((y.at4(0, 0, 4, 2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_ranges_sample_identity_without_rng_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before: u64 = rng.random();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AffineParams::sample(&mut rng, 0.0, (1.0, 1.0), 0.0).unwrap();
        assert!(p.is_identity());
        let after: u64 = rng.random();
        assert_eq!(before, after);
    }

    #[test]
    fn sampled_params_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let p = AffineParams::sample(&mut rng, 5.0, (0.9, 1.1), 2.0).unwrap();
            assert!(p.rotation.abs() <= 5.0f64.to_radians());
            assert!(p.scale >= 0.9 && p.scale < 1.1);
            assert!(p.jitter.0.abs() <= 2.0 && p.jitter.1.abs() <= 2.0);
        }
    }

    #[test]
    fn warp_grad_is_adjoint_of_forward() {
        // <warp(x), g> == <x, warp_grad(g)> for any linear warp.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::random_uniform(&[1, 1, 6, 6], &mut rng, 0.0, 1.0);
        let g = Tensor::random_uniform(&[1, 1, 6, 6], &mut rng, -1.0, 1.0);
        let p = AffineParams::new(0.3, 1.07, (0.8, -0.4)).unwrap();
        let wx = warp_bilinear(&x, &p);
        let wg = warp_bilinear_grad(&g, &p);
        let lhs: f64 = wx.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(wg.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

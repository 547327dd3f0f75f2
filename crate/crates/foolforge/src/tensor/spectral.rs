//! Frequency-domain image parameterization.
//!
//! An image is represented by half-plane Fourier coefficients theta of shape
//! `[c, 2, h, w/2 + 1]` (real and imaginary parts). Synthesis multiplies each
//! coefficient by a fixed 1/f amplitude scale, embeds the half plane into a
//! full complex grid with zeros elsewhere (no Hermitian mirroring), applies
//! an inverse 2-D DFT and keeps the real part. Low frequencies therefore
//! dominate for equal parameter magnitudes.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Tensor, TensorError};

/// Trainable spectral parameters for a `[channels, h, w]` image.
#[derive(Debug, Clone)]
pub struct SpectralParam {
    channels: usize,
    h: usize,
    w: usize,
    theta: Tensor,
}

impl SpectralParam {
    pub fn new(channels: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        if channels == 0 || h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op: "spectral_param",
                msg: format!("dimensions must be positive, got [{channels}, {h}, {w}]"),
            });
        }
        let theta = Tensor::zeros(&[channels, 2, h, half_width(w)]);
        Ok(Self { channels, h, w, theta })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut Tensor {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: Tensor) -> Result<(), TensorError> {
        if theta.shape() != self.theta.shape() {
            return Err(TensorError::IncompatibleShapes {
                op: "spectral_param.set_theta",
                lhs: self.theta.shape().to_vec(),
                rhs: theta.shape().to_vec(),
            });
        }
        self.theta = theta;
        Ok(())
    }

    /// Fills theta with i.i.d. normal draws of the given amplitude.
    pub fn init_random(&mut self, rng: &mut impl rand::Rng, amplitude: f64) {
        self.theta = Tensor::random_normal(self.theta.shape(), rng, 0.0, amplitude);
    }

    /// Pre-sigmoid spatial image implied by the current coefficients.
    pub fn pre_image(&self) -> Tensor {
        let scale = frequency_scale(self.h, self.w);
        spectral_pre(&self.theta, self.h, self.w, &scale)
    }

    /// Synthesized image in [0, 1]: `sigmoid(pre_image())`.
    pub fn synthesize(&self) -> Tensor {
        let mut img = self.pre_image();
        for v in img.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        img
    }
}

/// Number of retained columns in the half plane.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Per-bin amplitude scale `1 / max(f, 1/max(h, w))` where `f` is the radial
/// frequency in cycles per pixel.
pub fn frequency_scale(h: usize, w: usize) -> Vec<f64> {
    let wh = half_width(w);
    let f_min = 1.0 / h.max(w) as f64;
    let mut scale = Vec::with_capacity(h * wh);
    for ky in 0..h {
        let fy = ky.min(h - ky) as f64 / h as f64;
        for kx in 0..wh {
            let fx = kx as f64 / w as f64;
            let f = (fy * fy + fx * fx).sqrt();
            scale.push(1.0 / f.max(f_min));
        }
    }
    scale
}

/// Forward synthesis kernel: theta `[c, 2, h, wh]` -> pre-sigmoid `[c, h, w]`.
pub(crate) fn spectral_pre(theta: &Tensor, h: usize, w: usize, scale: &[f64]) -> Tensor {
    let c = theta.shape()[0];
    let wh = half_width(w);
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(w);
    let col_fft = planner.plan_fft_inverse(h);
    let mut out = Tensor::zeros(&[c, h, w]);
    let norm = 1.0 / (h * w) as f64;
    let td = theta.data();
    for ch in 0..c {
        let re = &td[(ch * 2) * h * wh..][..h * wh];
        let im = &td[(ch * 2 + 1) * h * wh..][..h * wh];
        let mut grid = vec![Complex::new(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..wh {
                let s = scale[ky * wh + kx];
                grid[ky * w + kx] = Complex::new(re[ky * wh + kx] * s, im[ky * wh + kx] * s);
            }
        }
        ifft2_in_place(&mut grid, h, w, row_fft.as_ref(), col_fft.as_ref());
        let od = &mut out.data_mut()[ch * h * w..][..h * w];
        for (o, v) in od.iter_mut().zip(&grid) {
            *o = v.re * norm;
        }
    }
    out
}

/// Adjoint of [`spectral_pre`]: image-space gradient -> theta gradient.
pub(crate) fn spectral_pre_grad(g: &Tensor, h: usize, w: usize, scale: &[f64]) -> Tensor {
    let c = g.shape()[0];
    let wh = half_width(w);
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut dtheta = Tensor::zeros(&[c, 2, h, wh]);
    let norm = 1.0 / (h * w) as f64;
    let gd = g.data();
    for ch in 0..c {
        let mut grid: Vec<Complex<f64>> = gd[ch * h * w..][..h * w]
            .iter()
            .map(|v| Complex::new(*v, 0.0))
            .collect();
        fft2_in_place(&mut grid, h, w, row_fft.as_ref(), col_fft.as_ref());
        let dd = dtheta.data_mut();
        for ky in 0..h {
            for kx in 0..wh {
                let s = scale[ky * wh + kx] * norm;
                let v = grid[ky * w + kx];
                dd[((ch * 2) * h + ky) * wh + kx] = s * v.re;
                dd[((ch * 2 + 1) * h + ky) * wh + kx] = s * v.im;
            }
        }
    }
    dtheta
}

fn ifft2_in_place(
    grid: &mut [Complex<f64>],
    h: usize,
    w: usize,
    row_fft: &dyn rustfft::Fft<f64>,
    col_fft: &dyn rustfft::Fft<f64>,
) {
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
}

pub(crate) fn fft2_in_place(
    grid: &mut [Complex<f64>],
    h: usize,
    w: usize,
    row_fft: &dyn rustfft::Fft<f64>,
    col_fft: &dyn rustfft::Fft<f64>,
) {
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
}

/// O(n^2) forward 2-D DFT used as an independent oracle in tests:
/// `X[ky, kx] = sum x[n, m] exp(-2 pi i (ky n / h + kx m / w))`.
pub fn dft2_brute_force(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for ky in 0..h {
        for kx in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for n in 0..h {
                for m in 0..w {
                    let ang = -tau * (ky * n) as f64 / h as f64 - tau * (kx * m) as f64 / w as f64;
                    acc += Complex::new(ang.cos(), ang.sin()) * x[n * w + m];
                }
            }
            out[ky * w + kx] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force inverse synthesis, the independent oracle for the FFT path.
    fn pre_image_brute_force(p: &SpectralParam) -> Tensor {
        let (c, h, w) = (p.channels(), p.height(), p.width());
        let wh = half_width(w);
        let scale = frequency_scale(h, w);
        let tau = 2.0 * std::f64::consts::PI;
        let td = p.theta().data();
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for n in 0..h {
                for m in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..h {
                        for kx in 0..wh {
                            let s = scale[ky * wh + kx];
                            let re = td[((ch * 2) * h + ky) * wh + kx] * s;
                            let im = td[((ch * 2 + 1) * h + ky) * wh + kx] * s;
                            let ang = tau * ((ky * n) as f64 / h as f64
                                + (kx * m) as f64 / w as f64);
                            acc += re * ang.cos() - im * ang.sin();
                        }
                    }
                    out.data_mut()[(ch * h + n) * w + m] = acc / (h * w) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn dc_only_coefficients_give_constant_image() {
        let mut p = SpectralParam::new(1, 8, 8).unwrap();
        // DC bin (0, 0) has scale max(h, w) = 8; set re = 2 -> pre = 16/64.
        p.theta_mut().data_mut()[0] = 2.0;
        let pre = p.pre_image();
        for v in pre.data() {
            assert!((v - 2.0 * 8.0 / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_synthesis_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w) in [(8usize, 8usize), (6, 10), (7, 5)] {
            let mut p = SpectralParam::new(2, h, w).unwrap();
            p.init_random(&mut rng, 1.0);
            let fast = p.pre_image();
            let slow = pre_image_brute_force(&p);
            assert!(
                fast.max_abs_diff(&slow) < 1e-10,
                "mismatch at {h}x{w}: {}",
                fast.max_abs_diff(&slow)
            );
        }
    }

    #[test]
    fn parseval_total_power_matches_brute_force_dft() {
        // sum |x|^2 = (1/(h w)) sum |X|^2 for the forward DFT.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random_uniform(&[8, 8], &mut rng, -1.0, 1.0);
        let spec = dft2_brute_force(x.data(), 8, 8);
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
        assert!((spatial - freq).abs() < 1e-10);
    }

    #[test]
    fn scale_is_reciprocal_radial_frequency_with_floor() {
        let s = frequency_scale(8, 8);
        let wh = half_width(8);
        // DC floors at 1/f_min = 8.
        assert!((s[0] - 8.0).abs() < 1e-12);
        // Bin (0, 1): f = 1/8 -> scale 8.
        assert!((s[1] - 8.0).abs() < 1e-12);
        // Bin (4, 4): f = sqrt(2)/2 -> scale sqrt(2).
        let f = (0.5f64 * 0.5 + 0.5 * 0.5).sqrt();
        assert!((s[4 * wh + 4] - 1.0 / f).abs() < 1e-12);
    }

    #[test]
    fn synthesize_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = SpectralParam::new(3, 16, 16).unwrap();
        p.init_random(&mut rng, 10.0);
        let img = p.synthesize();
        for v in img.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }
}

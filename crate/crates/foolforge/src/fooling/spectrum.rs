//! Spectral measurement separating low- from high-frequency images.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tensor::{Tensor, TensorError};

/// Fraction of non-DC spectral power at radial frequency strictly above
/// `max(h, w)/4` cycles per image, averaged over the channels of a
/// `[c, h, w]` image. A constant channel contributes 0.
pub fn high_freq_energy(image: &Tensor) -> Result<f64, TensorError> {
    if image.rank() != 3 {
        return Err(TensorError::Invalid {
            op: "high_freq_energy",
            msg: format!("expected [c, h, w], got {:?}", image.shape()),
        });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let cutoff = h.max(w) as f64 / 4.0;
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut sum = 0.0;
    for ch in 0..c {
        let mut grid: Vec<Complex<f64>> = image.data()[ch * h * w..][..h * w]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        crate::tensor::spectral::fft2_in_place(&mut grid, h, w, row_fft.as_ref(), col_fft.as_ref());
        let mut total = 0.0;
        let mut high = 0.0;
        for ky in 0..h {
            let fy = ky.min(h - ky) as f64;
            for kx in 0..w {
                if ky == 0 && kx == 0 {
                    continue;
                }
                let fx = kx.min(w - kx) as f64;
                let power = grid[ky * w + kx].norm_sqr();
                total += power;
                if (fy * fy + fx * fx).sqrt() > cutoff {
                    high += power;
                }
            }
        }
        if total > 0.0 {
            sum += high / total;
        }
    }
    Ok(sum / c as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::dft2_brute_force;

    use super::*;

    #[test]
    fn constant_image_has_zero_ratio() {
        let img = Tensor::full(&[3, 8, 8], 0.42);
        assert_eq!(high_freq_energy(&img).unwrap(), 0.0);
    }

    #[test]
    fn impulse_ratio_matches_the_brute_force_bin_count() {
        let (h, w) = (12, 10);
        let mut img = Tensor::zeros(&[1, h, w]);
        img.data_mut()[3 * w + 7] = 1.0;
        let got = high_freq_energy(&img).unwrap();

        let spectrum = dft2_brute_force(&img.data()[..h * w], h, w);
        let cutoff = h.max(w) as f64 / 4.0;
        let mut total = 0.0;
        let mut high = 0.0;
        for ky in 0..h {
            for kx in 0..w {
                if ky == 0 && kx == 0 {
                    continue;
                }
                let fy = ky.min(h - ky) as f64;
                let fx = kx.min(w - kx) as f64;
                let p = spectrum[ky * w + kx].norm_sqr();
                total += p;
                if (fy * fy + fx * fx).sqrt() > cutoff {
                    high += p;
                }
            }
        }
        assert!((got - high / total).abs() < 1e-12);

        let mut bins_above = 0usize;
        let mut bins_total = 0usize;
        for ky in 0..h {
            for kx in 0..w {
                if ky == 0 && kx == 0 {
                    continue;
                }
                let fy = ky.min(h - ky) as f64;
                let fx = kx.min(w - kx) as f64;
                bins_total += 1;
                if (fy * fy + fx * fx).sqrt() > cutoff {
                    bins_above += 1;
                }
            }
        }
        let flat = bins_above as f64 / bins_total as f64;
        assert!(
            (got - flat).abs() < 1e-9,
            "impulse spectrum is flat: got {got}, expected {flat}"
        );
    }

    #[test]
    fn noise_scores_higher_than_a_smooth_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Tensor::random_uniform(&[3, 16, 16], &mut rng, 0.0, 1.0);
        let ramp = Tensor::from_fn(&[3, 16, 16], |idx| {
            let hw = idx % 256;
            (hw / 16 + hw % 16) as f64 / 32.0
        });
        let rn = high_freq_energy(&noise).unwrap();
        let rr = high_freq_energy(&ramp).unwrap();
        assert!(rn > rr, "noise {rn} vs ramp {rr}");
    }

    #[test]
    fn rejects_non_image_ranks() {
        assert!(high_freq_energy(&Tensor::zeros(&[4, 4])).is_err());
    }
}

//! Distortion and transfer-rate ratio metrics.

use crate::tensor::{Tensor, TensorError};

/// Report-level pixel scale: distortions are quoted on 0..255 pixels.
/// By linearity this equals computing the deviation on prescaled values.
pub const PIXEL_SCALE: f64 = 255.0;

/// Compensated sum so uniform inputs survive exactly.
pub(crate) fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Root-mean-square deviation in the inputs' own units. Callers that quote
/// pixel distortions multiply by [`PIXEL_SCALE`].
pub fn rmsd(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::IncompatibleShapes {
            op: "rmsd",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.numel();
    if n == 0 {
        return Err(TensorError::Invalid {
            op: "rmsd",
            msg: "empty tensor".into(),
        });
    }
    let sq = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y));
    Ok((kahan_sum(sq) / n as f64).sqrt())
}

/// Ratio of transfer rate to distortion, scaled by 100. Undefined at zero
/// distortion, which callers report as not applicable.
pub fn rtd(rate: f64, rmsd: f64) -> Option<f64> {
    if rmsd == 0.0 {
        None
    } else {
        Some(rate / rmsd * 100.0)
    }
}

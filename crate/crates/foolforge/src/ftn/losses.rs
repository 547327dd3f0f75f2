//! Content, representation and smoothness losses, each available both as a
//! graph builder for training and as a plain evaluation.

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

use super::FtnError;

/// Sliding-window side for the structural similarity index.
pub const SSIM_WINDOW: usize = 8;
/// Stabilizers for unit dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean structural similarity between two NCHW batches: uniform windows,
/// valid padding, biased local moments.
pub fn build_ssim_mean(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
    let mu_a = g.window_mean(a, SSIM_WINDOW)?;
    let mu_b = g.window_mean(b, SSIM_WINDOW)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.window_mean(aa, SSIM_WINDOW)?;
    let e_bb = g.window_mean(bb, SSIM_WINDOW)?;
    let e_ab = g.window_mean(ab, SSIM_WINDOW)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let two_mu = g.scale(mu_ab, 2.0)?;
    let num1 = g.add_scalar(two_mu, SSIM_C1)?;
    let two_cov = g.scale(cov, 2.0)?;
    let num2 = g.add_scalar(two_cov, SSIM_C2)?;
    let num = g.mul(num1, num2)?;

    let mu_sum = g.add(mu_aa, mu_bb)?;
    let den1 = g.add_scalar(mu_sum, SSIM_C1)?;
    let var_sum = g.add(var_a, var_b)?;
    let den2 = g.add_scalar(var_sum, SSIM_C2)?;
    let den = g.mul(den1, den2)?;

    let map = g.div(num, den)?;
    g.mean_all(map)
}

/// Content loss `1 - mean SSIM`; zero when the batches agree.
pub fn build_content_loss(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
    let ssim = build_ssim_mean(g, a, b)?;
    let neg = g.scale(ssim, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Plain evaluation of [`build_content_loss`] for `[n, c, h, w]` tensors.
pub fn loss_content(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let na = g.input(a.clone())?;
    let nb = g.input(b.clone())?;
    let loss = build_content_loss(&mut g, na, nb)?;
    Ok(g.value(loss).item())
}

/// Squared distance between the row means of two equally sized `[n, d]`
/// representation matrices, the linear-kernel maximum mean discrepancy.
pub fn build_mmd_loss(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa != sb {
        return Err(TensorError::IncompatibleShapes {
            op: "mmd",
            lhs: sa,
            rhs: sb,
        });
    }
    let n = sa[0];
    let ones = g.input(Tensor::full(&[1, n], 1.0 / n as f64))?;
    let mean_a = g.matmul(ones, a)?;
    let mean_b = g.matmul(ones, b)?;
    let diff = g.sub(mean_a, mean_b)?;
    let sq = g.mul(diff, diff)?;
    g.sum_all(sq)
}

/// Plain evaluation of [`build_mmd_loss`].
pub fn loss_mmd(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let na = g.input(a.clone())?;
    let nb = g.input(b.clone())?;
    let loss = build_mmd_loss(&mut g, na, nb)?;
    Ok(g.value(loss).item())
}

/// Mean squared forward-difference roughness of an NCHW batch.
pub fn loss_tv(x: &Tensor) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let nx = g.input(x.clone())?;
    let loss = g.tv_loss(nx)?;
    Ok(g.value(loss).item())
}

/// Weighted sum of precomputed components.
pub fn loss_total(l_c: f64, l_rep: f64, l_tv: f64, gamma: f64, lambda: f64) -> Result<f64, FtnError> {
    if gamma < 0.0 || lambda < 0.0 {
        return Err(FtnError::Config {
            msg: format!("loss weights {gamma}/{lambda} must be nonnegative"),
        });
    }
    Ok(l_c + gamma * l_rep + lambda * l_tv)
}

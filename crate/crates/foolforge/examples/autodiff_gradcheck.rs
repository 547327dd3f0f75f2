//! Tours the reverse-mode tape: every differentiable primitive the victims
//! and the transfer net rely on gets its analytic gradient checked against
//! central finite differences, one perturbed tensor at a time.
//!
//! ```text
//! cargo run --example autodiff_gradcheck
//! ```

use foolforge::tensor::{check_gradient, AffineParams, Graph, NodeId, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>>;

fn main() -> Result<(), TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Offset keeps relu inputs away from the kink at zero, where the
    // subgradient and the finite difference legitimately disagree.
    let mut noise = |shape: &[usize], offset: f64| {
        let mut t = Tensor::from_fn(shape, |_| rng.random_range(0.1..0.9f64) + offset);
        if offset < 0.0 {
            // Mixed signs, still bounded away from zero.
            let flip: Vec<f64> = t
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { *v } else { -*v })
                .collect();
            t = Tensor::new(shape, flip).expect("same shape");
        }
        t
    };

    let image = noise(&[2, 3, 8, 8], -1.0);
    let kernel = noise(&[4, 3, 3, 3], -1.0);
    let scale = noise(&[4], 0.5);
    let bias = noise(&[4], -1.0);
    let tkernel = noise(&[4, 2, 4, 4], -1.0);
    let dense = noise(&[12, 5], -1.0);
    let vector = noise(&[12], -1.0);

    let cases: Vec<(&str, Tensor, Build)> = vec![
        (
            "conv2d + relu (wrt image)",
            image.clone(),
            Box::new({
                let kernel = kernel.clone();
                move |g, x| {
                    let k = g.input(kernel.clone())?;
                    let y = g.conv2d(x, k, 1, 1)?;
                    let y = g.relu(y)?;
                    g.sum_all(y)
                }
            }),
        ),
        (
            "conv2d + sigmoid (wrt kernel)",
            kernel.clone(),
            Box::new({
                let image = image.clone();
                move |g, k| {
                    let x = g.input(image.clone())?;
                    let y = g.conv2d(x, k, 2, 1)?;
                    let y = g.sigmoid(y)?;
                    g.mean_all(y)
                }
            }),
        ),
        (
            "conv_transpose2d + tanh (wrt kernel)",
            tkernel.clone(),
            Box::new({
                let image = noise(&[1, 4, 5, 5], -1.0);
                move |g, k| {
                    let x = g.input(image.clone())?;
                    let y = g.conv_transpose2d(x, k, 2, 1)?;
                    let y = g.tanh(y)?;
                    g.sum_all(y)
                }
            }),
        ),
        (
            "adain (wrt image)",
            noise(&[2, 4, 6, 6], -1.0),
            Box::new({
                let scale = scale.clone();
                let bias = bias.clone();
                move |g, x| {
                    let s = g.input(scale.clone())?;
                    let b = g.input(bias.clone())?;
                    let y = g.adain(x, s, b, 1e-5)?;
                    g.sum_all(y)
                }
            }),
        ),
        (
            "adain (wrt scale and bias)",
            {
                let mut joined = scale.data().to_vec();
                joined.extend_from_slice(bias.data());
                Tensor::new(&[8], joined)?
            },
            Box::new({
                let content = noise(&[2, 4, 6, 6], -1.0);
                move |g, sb| {
                    let x = g.input(content.clone())?;
                    let s = g.slice1d(sb, 0, 4)?;
                    let b = g.slice1d(sb, 4, 4)?;
                    let y = g.adain(x, s, b, 1e-5)?;
                    let y = g.sin(y)?;
                    g.sum_all(y)
                }
            }),
        ),
        (
            "warp + window_mean (wrt image)",
            noise(&[1, 3, 9, 9], -1.0),
            Box::new(move |g, x| {
                let params = AffineParams {
                    rotation: 9.0_f64.to_radians(),
                    scale: 1.05,
                    jitter: (0.6, -0.4),
                };
                let y = g.warp(x, params)?;
                let y = g.window_mean(y, 3)?;
                g.sum_all(y)
            }),
        ),
        (
            "matmul + cross_entropy (wrt weights)",
            dense.clone(),
            Box::new({
                let rows = noise(&[3, 12], -1.0);
                move |g, w| {
                    let x = g.input(rows.clone())?;
                    let logits = g.matmul(x, w)?;
                    g.cross_entropy(logits, &[0, 3, 4])
                }
            }),
        ),
        (
            "slice1d + concat_cols + gauss (wrt vector)",
            vector.clone(),
            Box::new(move |g, v| {
                let head = g.slice1d(v, 0, 6)?;
                let tail = g.slice1d(v, 6, 6)?;
                let head = g.reshape(head, &[2, 3])?;
                let tail = g.reshape(tail, &[2, 3])?;
                let joined = g.concat_cols(head, tail)?;
                let joined = g.gauss(joined)?;
                g.sum_all(joined)
            }),
        ),
        (
            "tv_loss (wrt image)",
            noise(&[1, 3, 7, 7], -1.0),
            Box::new(move |g, x| g.tv_loss(x)),
        ),
        (
            "softmax + mul (wrt logits)",
            noise(&[4, 6], -1.0),
            Box::new({
                let weights = noise(&[4, 6], -1.0);
                move |g, x| {
                    let p = g.softmax(x)?;
                    let w = g.input(weights.clone())?;
                    let y = g.mul(p, w)?;
                    g.sum_all(y)
                }
            }),
        ),
    ];

    println!(
        "{:<44} {:>8} {:>12} {:>12}",
        "case", "checked", "max_abs_err", "max_rel_err"
    );
    let mut worst = 0.0_f64;
    for (name, input, build) in cases {
        let report = check_gradient(build, &input, 1e-5, None)?;
        worst = worst.max(report.max_rel_err);
        println!(
            "{:<44} {:>8} {:>12.3e} {:>12.3e}",
            name, report.checked, report.max_abs_err, report.max_rel_err
        );
        assert!(
            report.max_rel_err < 1e-4,
            "{name}: analytic and numeric gradients disagree"
        );
    }
    println!("\nall gradients agree with finite differences (worst rel err {worst:.3e})");
    Ok(())
}

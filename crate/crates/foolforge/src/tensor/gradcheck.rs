//! Finite-difference gradient checking.
//!
//! The harness rebuilds the graph from scratch for every probe, so it also
//! exercises forward determinism: a flaky forward pass shows up as noise far
//! above the expected O(h^2) truncation error.

use super::{Graph, NodeId, Tensor, TensorError};

/// Worst-case errors across the probed elements.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central finite differences of `f` at `x` for the given flat elements.
pub fn finite_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64, TensorError>,
    x: &Tensor,
    h: f64,
    elements: &[usize],
) -> Result<Vec<f64>, TensorError> {
    let mut out = Vec::with_capacity(elements.len());
    for &i in elements {
        let mut hi = x.clone();
        hi.data_mut()[i] += h;
        let mut lo = x.clone();
        lo.data_mut()[i] -= h;
        out.push((f(&hi)? - f(&lo)?) / (2.0 * h));
    }
    Ok(out)
}

/// Compares the analytic gradient of `build` (a graph from the probe tensor
/// to a scalar) against central differences with step `h`. `elements` picks
/// the probed coordinates; `None` probes every element.
pub fn check_gradient(
    build: impl Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
    x: &Tensor,
    h: f64,
    elements: Option<&[usize]>,
) -> Result<GradCheckReport, TensorError> {
    let all: Vec<usize>;
    let elements = match elements {
        Some(e) => e,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };

    let mut graph = Graph::new();
    let xid = graph.param(x.clone())?;
    let loss = build(&mut graph, xid)?;
    if graph.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarSeed {
            shape: graph.value(loss).shape().to_vec(),
        });
    }
    let grads = graph.backward(loss)?;
    let analytic = grads.wrt_or_zeros(xid, x.shape());

    let numeric = finite_difference(
        |probe: &Tensor| {
            let mut g = Graph::new();
            let xid = g.input(probe.clone())?;
            let loss = build(&mut g, xid)?;
            Ok(g.value(loss).item())
        },
        x,
        h,
        elements,
    )?;

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: elements.len(),
    };
    for (&i, &n) in elements.iter().zip(&numeric) {
        let a = analytic.data()[i];
        let abs = (a - n).abs();
        // The denominator floor keeps FD noise from dominating near-zero
        // gradients while still flagging wrong magnitudes.
        let rel = abs / a.abs().max(n.abs()).max(1e-3);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let x = Tensor::new(&[4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let report = check_gradient(
            |g, xid| {
                let sq = g.mul(xid, xid)?;
                g.sum_all(sq)
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn broken_gradient_is_detected() {
        // tanh forward with a relu-style graph around it would be fine; to
        // fake a wrong gradient, compare sum(2x) forward against the FD of
        // sum(x*x): magnitudes differ so the report must flag it.
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let numeric = finite_difference(
            |p: &Tensor| Ok(p.data().iter().map(|v| v * v).sum()),
            &x,
            1e-5,
            &[0, 1, 2],
        )
        .unwrap();
        // d/dx sum(x^2) = 2x = [2, 4, 6]; a claimed gradient of [1, 1, 1]
        // would show rel err near 1.
        let wrong = [1.0, 1.0, 1.0];
        let max_rel: f64 = numeric
            .iter()
            .zip(wrong)
            .map(|(n, a)| (a - n).abs() / n.abs().max(a.abs()).max(1e-3))
            .fold(0.0, f64::max);
        assert!(max_rel > 0.4);
    }

    #[test]
    fn element_subset_probes_only_requested_entries() {
        let x = Tensor::new(&[10], (0..10).map(|v| v as f64 * 0.1).collect()).unwrap();
        let report = check_gradient(
            |g, xid| {
                let t = g.tanh(xid)?;
                g.mean_all(t)
            },
            &x,
            1e-5,
            Some(&[0, 5, 9]),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-7);
    }
}

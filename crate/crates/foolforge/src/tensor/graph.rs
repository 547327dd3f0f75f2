//! Reverse-mode autodiff over an append-only tape.
//!
//! Nodes are recorded in insertion order, which is also a valid topological
//! order, so the backward pass is a single reverse sweep. Every op checks its
//! output for NaN/Inf and fails fast instead of propagating poison.

use std::sync::Arc;

use super::kernels as k;
use super::spectral;
use super::warp::{self, AffineParams};
use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    // Forward closures capture their own copies of these constants; the
    // fields here keep tape dumps self-describing.
    AddScalar(#[allow(dead_code)] f64),
    Relu,
    Sigmoid,
    Tanh,
    Sin,
    Gauss,
    ClampSt {
        #[allow(dead_code)]
        lo: f64,
        #[allow(dead_code)]
        hi: f64,
    },
    Matmul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    MaxPool2,
    Softmax,
    CrossEntropy { labels: Vec<usize> },
    ChannelMean,
    ChannelVar,
    Adain { eps: f64 },
    WindowMean { k: usize },
    ResizeNearest,
    ResizeBilinear,
    Warp { params: AffineParams },
    Spectral { h: usize, w: usize, scale: Arc<Vec<f64>> },
    Reshape,
    ConcatCols,
    Slice1d { start: usize },
    SumAll,
    MeanAll,
    TvLoss,
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::Div => "div",
        Op::Scale(_) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Relu => "relu",
        Op::Sigmoid => "sigmoid",
        Op::Tanh => "tanh",
        Op::Sin => "sin",
        Op::Gauss => "gauss",
        Op::ClampSt { .. } => "clamp_st",
        Op::Matmul => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::MaxPool2 => "max_pool2",
        Op::Softmax => "softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::ChannelMean => "channel_mean",
        Op::ChannelVar => "channel_var",
        Op::Adain { .. } => "adain",
        Op::WindowMean { .. } => "window_mean",
        Op::ResizeNearest => "resize_nearest",
        Op::ResizeBilinear => "resize_bilinear",
        Op::Warp { .. } => "warp",
        Op::Spectral { .. } => "spectral",
        Op::Reshape => "reshape",
        Op::ConcatCols => "concat_cols",
        Op::Slice1d { .. } => "slice1d",
        Op::SumAll => "sum_all",
        Op::MeanAll => "mean_all",
        Op::TvLoss => "tv_loss",
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
}

/// Gradients of a backward pass, indexed by [`NodeId`]. Nodes the seed does
/// not depend on carry no gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, or zeros of the given shape if it was unreached.
    pub fn wrt_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Append-only autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Value held at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    /// Trainable leaves in insertion order.
    pub fn trainable_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op_name(&op),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node { op, parents, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant leaf; gradients flow to it but it is not listed as trainable.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.push(Op::Leaf { trainable: false }, vec![], value)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.push(Op::Leaf { trainable: true }, vec![], value)
    }

    fn binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if k::broadcast_shape(va.shape(), vb.shape()).is_none() {
            return Err(TensorError::IncompatibleShapes {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let out = k::broadcast_binary(va, vb, f);
        self.push(op, vec![a, b], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    fn unary(
        &mut self,
        op: Op,
        x: NodeId,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, TensorError> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape(), v.data().iter().map(|a| f(*a)).collect())
            .expect("same shape");
        self.push(op, vec![x], out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        self.unary(Op::AddScalar(c), x, |v| v + c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Sigmoid, x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Sin, x, f64::sin)
    }

    /// Gaussian bump `exp(-x^2)`.
    pub fn gauss(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Gauss, x, |v| (-v * v).exp())
    }

    /// Clamp to `[lo, hi]` with a straight-through gradient.
    pub fn clamp_st(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        if lo >= hi {
            return Err(TensorError::Invalid {
                op: "clamp_st",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        self.unary(Op::ClampSt { lo, hi }, x, |v| v.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TensorError::IncompatibleShapes {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let out = k::matmul(va, vb);
        self.push(Op::Matmul, vec![a, b], out)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "conv2d",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        if vk.rank() != 4 || vk.shape()[1] != vx.shape()[1] {
            return Err(TensorError::IncompatibleShapes {
                op: "conv2d",
                lhs: vx.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        if stride == 0
            || vx.shape()[2] + 2 * pad < vk.shape()[2]
            || vx.shape()[3] + 2 * pad < vk.shape()[3]
        {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!(
                    "kernel {:?} with stride {stride} pad {pad} does not fit input {:?}",
                    vk.shape(),
                    vx.shape()
                ),
            });
        }
        let out = k::conv2d(vx, vk, stride, pad);
        self.push(Op::Conv2d { stride, pad }, vec![x, kernel], out)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "conv_transpose2d",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        if vk.rank() != 4 || vk.shape()[0] != vx.shape()[1] {
            return Err(TensorError::IncompatibleShapes {
                op: "conv_transpose2d",
                lhs: vx.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        let oh = (vx.shape()[2] - 1) * stride + vk.shape()[2];
        let ow = (vx.shape()[3] - 1) * stride + vk.shape()[3];
        if stride == 0 || oh <= 2 * pad || ow <= 2 * pad {
            return Err(TensorError::Invalid {
                op: "conv_transpose2d",
                msg: format!("stride {stride} pad {pad} leave no output"),
            });
        }
        let out = k::conv_transpose2d(vx, vk, stride, pad);
        self.push(Op::ConvTranspose2d { stride, pad }, vec![x, kernel], out)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 || vx.shape()[2] < 2 || vx.shape()[3] < 2 {
            return Err(TensorError::BadRank {
                op: "max_pool2",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let out = k::max_pool2(vx);
        self.push(Op::MaxPool2, vec![x], out)
    }

    /// Row-wise softmax of `[n, classes]` logits.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 {
            return Err(TensorError::BadRank {
                op: "softmax",
                expected: 2,
                shape: vx.shape().to_vec(),
            });
        }
        let out = k::softmax_rows(vx);
        self.push(Op::Softmax, vec![x], out)
    }

    /// Fused softmax + mean cross-entropy against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let v = &self.nodes[logits.0].value;
        if v.rank() != 2 {
            return Err(TensorError::BadRank {
                op: "cross_entropy",
                expected: 2,
                shape: v.shape().to_vec(),
            });
        }
        if labels.len() != v.shape()[0] || labels.is_empty() {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} labels for {} rows", labels.len(), v.shape()[0]),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= v.shape()[1]) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {} classes", v.shape()[1]),
            });
        }
        let loss = Tensor::scalar(k::cross_entropy(v, labels));
        self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            loss,
        )
    }

    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "channel_mean",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let out = k::channel_mean(vx);
        self.push(Op::ChannelMean, vec![x], out)
    }

    pub fn channel_var(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "channel_var",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let out = k::channel_var(vx);
        self.push(Op::ChannelVar, vec![x], out)
    }

    /// Adaptive instance normalization with per-channel scale and bias.
    pub fn adain(
        &mut self,
        x: NodeId,
        scale: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let vs = &self.nodes[scale.0].value;
        let vb = &self.nodes[bias.0].value;
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "adain",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let c = vx.shape()[1];
        if vs.shape() != [c] || vb.shape() != [c] {
            return Err(TensorError::IncompatibleShapes {
                op: "adain",
                lhs: vx.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "adain",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let out = k::adain(vx, vs, vb, eps);
        self.push(Op::Adain { eps }, vec![x, scale, bias], out)
    }

    /// Mean over sliding k x k windows with valid padding.
    pub fn window_mean(&mut self, x: NodeId, window: usize) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "window_mean",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        if window == 0 || window > vx.shape()[2] || window > vx.shape()[3] {
            return Err(TensorError::Invalid {
                op: "window_mean",
                msg: format!("window {window} does not fit {:?}", vx.shape()),
            });
        }
        let out = k::window_mean(vx, window);
        self.push(Op::WindowMean { k: window }, vec![x], out)
    }

    pub fn resize_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 || oh == 0 || ow == 0 {
            return Err(TensorError::Invalid {
                op: "resize_nearest",
                msg: format!("cannot resize {:?} to {oh}x{ow}", vx.shape()),
            });
        }
        let out = k::resize_nearest(vx, oh, ow);
        self.push(Op::ResizeNearest, vec![x], out)
    }

    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 || oh == 0 || ow == 0 {
            return Err(TensorError::Invalid {
                op: "resize_bilinear",
                msg: format!("cannot resize {:?} to {oh}x{ow}", vx.shape()),
            });
        }
        let out = k::resize_bilinear(vx, oh, ow);
        self.push(Op::ResizeBilinear, vec![x], out)
    }

    /// Affine warp with bilinear sampling; params are attributes, not inputs.
    pub fn warp(&mut self, x: NodeId, params: AffineParams) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "warp",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let out = warp::warp_bilinear(vx, &params);
        self.push(Op::Warp { params }, vec![x], out)
    }

    /// Spectral synthesis: theta `[c, 2, h, w/2+1]` -> pre-sigmoid `[c, h, w]`.
    pub fn spectral(&mut self, theta: NodeId, h: usize, w: usize) -> Result<NodeId, TensorError> {
        let vt = &self.nodes[theta.0].value;
        let wh = spectral::half_width(w);
        if vt.rank() != 4 || vt.shape()[1] != 2 || vt.shape()[2] != h || vt.shape()[3] != wh {
            return Err(TensorError::Invalid {
                op: "spectral",
                msg: format!(
                    "theta shape {:?} does not match [c, 2, {h}, {wh}]",
                    vt.shape()
                ),
            });
        }
        let scale = Arc::new(spectral::frequency_scale(h, w));
        let out = spectral::spectral_pre(vt, h, w, &scale);
        self.push(Op::Spectral { h, w, scale }, vec![theta], out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.nodes[x.0].value.reshaped(shape)?;
        self.push(Op::Reshape, vec![x], out)
    }

    /// Concatenates two `[n, a]` and `[n, b]` matrices into `[n, a + b]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[0] != vb.shape()[0] {
            return Err(TensorError::IncompatibleShapes {
                op: "concat_cols",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (n, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = Tensor::zeros(&[n, ca + cb]);
        for i in 0..n {
            let row = &mut out.data_mut()[i * (ca + cb)..][..ca + cb];
            row[..ca].copy_from_slice(&va.data()[i * ca..][..ca]);
            row[ca..].copy_from_slice(&vb.data()[i * cb..][..cb]);
        }
        self.push(Op::ConcatCols, vec![a, b], out)
    }

    /// Contiguous slice of a rank-1 tensor.
    pub fn slice1d(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 1 || start + len > vx.shape()[0] || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice1d",
                msg: format!("slice {start}..{} of shape {:?}", start + len, vx.shape()),
            });
        }
        let out = Tensor::new(&[len], vx.data()[start..start + len].to_vec())?;
        self.push(Op::Slice1d { start }, vec![x], out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = Tensor::scalar(self.nodes[x.0].value.data().iter().sum());
        self.push(Op::SumAll, vec![x], v)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let v = Tensor::scalar(vx.data().iter().sum::<f64>() / vx.numel() as f64);
        self.push(Op::MeanAll, vec![x], v)
    }

    /// Mean squared forward-difference roughness of an NCHW batch.
    pub fn tv_loss(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(TensorError::BadRank {
                op: "tv_loss",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let v = Tensor::scalar(k::tv_loss(vx));
        self.push(Op::TvLoss, vec![x], v)
    }

    /// Reverse sweep from a scalar seed. Returns one gradient per reachable
    /// node; repeated calls are bit-identical.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients, TensorError> {
        self.backward_masked(seed, None)
    }

    /// Backward restricted to paths that reach a trainable leaf. Skips the
    /// expensive kernel/weight VJPs when weights entered as constants.
    pub fn backward_params(&self, seed: NodeId) -> Result<Gradients, TensorError> {
        let requested = self.trainable_ids();
        self.backward_masked(seed, Some(&requested))
    }

    /// Backward restricted to paths reaching any of the given nodes.
    pub fn backward_wrt(&self, seed: NodeId, requested: &[NodeId]) -> Result<Gradients, TensorError> {
        self.backward_masked(seed, Some(requested))
    }

    fn backward_masked(
        &self,
        seed: NodeId,
        requested: Option<&[NodeId]>,
    ) -> Result<Gradients, TensorError> {
        let seed_val = &self.nodes[seed.0].value;
        if seed_val.numel() != 1 {
            return Err(TensorError::NonScalarSeed {
                shape: seed_val.shape().to_vec(),
            });
        }
        // A node needs a gradient iff its value depends on a requested node.
        // Parents precede children, so one ascending sweep settles the mask.
        let mask: Option<Vec<bool>> = requested.map(|req| {
            let mut m = vec![false; self.nodes.len()];
            for id in req {
                m[id.0] = true;
            }
            for i in 0..self.nodes.len() {
                if !m[i] && self.nodes[i].parents.iter().any(|p| m[p.0]) {
                    m[i] = true;
                }
            }
            m
        });
        let need = |i: usize| mask.as_ref().is_none_or(|m| m[i]);

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !need(seed.0) {
            return Ok(Gradients { grads });
        }
        grads[seed.0] = Some(Tensor::full(seed_val.shape(), 1.0));
        for idx in (0..=seed.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let parent_need: Vec<bool> = node.parents.iter().map(|p| need(p.0)).collect();
            let contribs = self.vjp(node, &g, &parent_need)?;
            grads[idx] = Some(g);
            for ((parent, contrib), needed) in
                node.parents.iter().zip(contribs).zip(parent_need)
            {
                if !needed {
                    continue;
                }
                let Some(c) = contrib else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Per-op vector-Jacobian product: gradient contribution per parent.
    /// `need` lets multi-input ops skip work for unneeded parents.
    fn vjp(&self, node: &Node, g: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>, TensorError> {
        let pv = |i: usize| &self.nodes[node.parents[i].0].value;
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add => vec![
                Some(k::sum_to(g, pv(0).shape())),
                Some(k::sum_to(g, pv(1).shape())),
            ],
            Op::Sub => {
                let mut db = k::sum_to(g, pv(1).shape());
                for v in db.data_mut() {
                    *v = -*v;
                }
                vec![Some(k::sum_to(g, pv(0).shape())), Some(db)]
            }
            Op::Mul => {
                let da = k::broadcast_binary(g, pv(1), |g, b| g * b);
                let db = k::broadcast_binary(g, pv(0), |g, a| g * a);
                vec![
                    Some(k::sum_to(&da, pv(0).shape())),
                    Some(k::sum_to(&db, pv(1).shape())),
                ]
            }
            Op::Div => {
                let da = k::broadcast_binary(g, pv(1), |g, b| g / b);
                let gy = k::broadcast_binary(g, y, |g, y| g * y);
                let db = k::broadcast_binary(&gy, pv(1), |t, b| -t / b);
                vec![
                    Some(k::sum_to(&da, pv(0).shape())),
                    Some(k::sum_to(&db, pv(1).shape())),
                ]
            }
            Op::Scale(c) => {
                let c = *c;
                vec![Some(map2(g, |v| v * c))]
            }
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Relu => vec![Some(zip2(g, pv(0), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid => vec![Some(zip2(g, y, |g, y| g * y * (1.0 - y)))],
            Op::Tanh => vec![Some(zip2(g, y, |g, y| g * (1.0 - y * y)))],
            Op::Sin => vec![Some(zip2(g, pv(0), |g, x| g * x.cos()))],
            Op::Gauss => {
                let x = pv(0);
                let mut dx = g.clone();
                for ((d, xv), yv) in dx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *d *= -2.0 * xv * yv;
                }
                vec![Some(dx)]
            }
            Op::ClampSt { .. } => vec![Some(g.clone())],
            Op::Matmul => vec![
                need[0].then(|| k::matmul_grad_a(g, pv(1))),
                need[1].then(|| k::matmul_grad_b(g, pv(0))),
            ],
            Op::Conv2d { stride, pad } => vec![
                need[0].then(|| k::conv2d_grad_input(g, pv(1), pv(0).shape(), *stride, *pad)),
                need[1].then(|| k::conv2d_grad_kernel(g, pv(0), pv(1).shape(), *stride, *pad)),
            ],
            Op::ConvTranspose2d { stride, pad } => vec![
                need[0].then(|| k::tconv_grad_input(g, pv(1), pv(0).shape(), *stride, *pad)),
                need[1].then(|| k::tconv_grad_kernel(g, pv(0), pv(1).shape(), *stride, *pad)),
            ],
            Op::MaxPool2 => vec![Some(k::max_pool2_grad(g, pv(0)))],
            Op::Softmax => vec![Some(k::softmax_rows_grad(g, y))],
            Op::CrossEntropy { labels } => {
                vec![Some(k::cross_entropy_grad(pv(0), labels, g.item()))]
            }
            Op::ChannelMean => vec![Some(k::channel_mean_grad(g, pv(0).shape()))],
            Op::ChannelVar => vec![Some(k::channel_var_grad(g, pv(0)))],
            Op::Adain { eps } => {
                let (dx, ds, db) = k::adain_grad(g, pv(0), pv(1), *eps);
                vec![Some(dx), Some(ds), Some(db)]
            }
            Op::WindowMean { k: win } => vec![Some(k::window_mean_grad(g, pv(0).shape(), *win))],
            Op::ResizeNearest => vec![Some(k::resize_nearest_grad(g, pv(0).shape()))],
            Op::ResizeBilinear => vec![Some(k::resize_bilinear_grad(g, pv(0).shape()))],
            Op::Warp { params } => vec![Some(warp::warp_bilinear_grad(g, params))],
            Op::Spectral { h, w, scale } => {
                vec![Some(spectral::spectral_pre_grad(g, *h, *w, scale))]
            }
            Op::Reshape => vec![Some(g.reshaped(pv(0).shape())?)],
            Op::ConcatCols => {
                let (va, vb) = (pv(0), pv(1));
                let (n, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut da = Tensor::zeros(va.shape());
                let mut db = Tensor::zeros(vb.shape());
                for i in 0..n {
                    let row = &g.data()[i * (ca + cb)..][..ca + cb];
                    da.data_mut()[i * ca..][..ca].copy_from_slice(&row[..ca]);
                    db.data_mut()[i * cb..][..cb].copy_from_slice(&row[ca..]);
                }
                vec![Some(da), Some(db)]
            }
            Op::Slice1d { start } => {
                let mut dx = Tensor::zeros(pv(0).shape());
                dx.data_mut()[*start..*start + g.numel()].copy_from_slice(g.data());
                vec![Some(dx)]
            }
            Op::SumAll => vec![Some(Tensor::full(pv(0).shape(), g.item()))],
            Op::MeanAll => {
                let n = pv(0).numel() as f64;
                vec![Some(Tensor::full(pv(0).shape(), g.item() / n))]
            }
            Op::TvLoss => vec![Some(k::tv_loss_grad(pv(0), g.item()))],
        };
        Ok(out)
    }
}

fn map2(g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(g.shape(), g.data().iter().map(|v| f(*v)).collect()).expect("same shape")
}

fn zip2(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        g.shape(),
        g.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| f(*a, *b))
            .collect(),
    )
    .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_seed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarSeed { .. })
        ));
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = x + x => dy/dx = 2.
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(5.0)).unwrap();
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn unused_nodes_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0)).unwrap();
        let dead = g.param(Tensor::scalar(9.0)).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(dead).is_none());
        assert_eq!(
            grads.wrt_or_zeros(dead, &[]).item(),
            0.0,
            "zeros fallback for unreached nodes"
        );
    }

    #[test]
    fn non_finite_outputs_are_rejected_with_op_name() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.0)).unwrap();
        let b = g.input(Tensor::scalar(0.0)).unwrap();
        let err = g.div(a, b).unwrap_err();
        match err {
            TensorError::NonFinite { op, .. } => assert_eq!(op, "div"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_is_bit_identical_across_runs() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .param(Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 31 + 7) % 13) as f64 / 13.0))
                .unwrap();
            let k = g
                .param(Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 17 + 3) % 11) as f64 / 11.0 - 0.5))
                .unwrap();
            let c = g.conv2d(x, k, 1, 1).unwrap();
            let r = g.relu(c).unwrap();
            let p = g.max_pool2(r).unwrap();
            let loss = g.mean_all(p).unwrap();
            let grads = g.backward(loss).unwrap();
            (
                grads.wrt(x).unwrap().data().to_vec(),
                grads.wrt(k).unwrap().data().to_vec(),
            )
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits = g
            .param(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = k::softmax_rows(g.value(logits));
        let got = grads.wrt(logits).unwrap();
        for j in 0..3 {
            let want = p.data()[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((got.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn trainable_ids_track_param_leaves_only() {
        let mut g = Graph::new();
        let _c = g.input(Tensor::scalar(1.0)).unwrap();
        let p1 = g.param(Tensor::scalar(2.0)).unwrap();
        let p2 = g.param(Tensor::scalar(3.0)).unwrap();
        assert_eq!(g.trainable_ids(), vec![p1, p2]);
        assert!(g.is_trainable(p1));
    }

    #[test]
    fn backward_params_matches_full_backward_on_trainables() {
        let build = |g: &mut Graph| {
            let x = g
                .param(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin()))
                .unwrap();
            let k = g
                .input(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.11).cos()))
                .unwrap();
            let c = g.conv2d(x, k, 1, 1).unwrap();
            let loss = g.mean_all(c).unwrap();
            (x, k, loss)
        };
        let mut g1 = Graph::new();
        let (x1, k1, l1) = build(&mut g1);
        let full = g1.backward(l1).unwrap();
        let fast = g1.backward_params(l1).unwrap();
        assert_eq!(full.wrt(x1).unwrap(), fast.wrt(x1).unwrap());
        // The frozen kernel gets a gradient only in the full pass.
        assert!(full.wrt(k1).is_some());
        assert!(fast.wrt(k1).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[4, 2])).unwrap();
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::IncompatibleShapes { op: "matmul", .. })
        ));
        let c = g.input(Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.conv2d(a, c, 1, 0).is_err());
    }
}

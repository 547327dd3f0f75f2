//! Victim classifiers: architecture descriptions, forward graphs, training,
//! datasets and checkpoints.

mod checkpoint;
mod data;
mod stock;
mod train;

pub use checkpoint::{load_classifier, save_classifier};
pub use data::{
    load_cifar10, load_dataset, render_class, save_dataset, synthetic_dataset, Dataset,
    DatasetSplit, Split, CLASS_NAMES, IMAGE_SIDE, NUM_CLASSES, TARGET_CLASS,
};
pub use stock::{
    oracle_architecture, stock_architectures, train_architecture, validation_architectures,
};
pub use train::{accuracy, train_classifier, EpochStats, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum VictimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("architecture {name}: {msg}")]
    Arch { name: String, msg: String },
    #[error("dataset: {msg}")]
    Dataset { msg: String },
    #[error("checkpoint: {msg}")]
    Checkpoint { msg: String },
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
}

/// One layer of a sequential CNN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    /// 2-D convolution with bias.
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2,
    /// Two 3x3 same-channel convolutions with a skip connection.
    Residual { channels: usize },
    Flatten,
    /// Fully connected layer with bias.
    Dense { out: usize },
}

/// Named reference to a layer whose activation is observable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub name: String,
    pub layer: usize,
}

/// Output shape of a layer during shape inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { n: usize },
}

/// Full description of a victim network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Input as (channels, height, width).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<LayerDesc>,
    pub taps: Vec<Tap>,
}

impl ArchitectureSpec {
    /// Shape-checks the whole stack and the tap layout.
    pub fn validate(&self) -> Result<(), VictimError> {
        self.infer_shapes()?;
        Ok(())
    }

    fn err(&self, msg: String) -> VictimError {
        VictimError::Arch {
            name: self.name.clone(),
            msg,
        }
    }

    /// Per-layer output shapes; errors carry the offending layer index.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>, VictimError> {
        if self.num_classes < 2 {
            return Err(self.err(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let (ci, hi, wi) = self.input;
        if ci == 0 || hi == 0 || wi == 0 {
            return Err(self.err(format!("bad input shape {:?}", self.input)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = LayerShape::Spatial { c: ci, h: hi, w: wi };
        let mut last_conv = None;
        let mut flatten_at = None;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (LayerDesc::Conv { out, kernel, stride, pad }, LayerShape::Spatial { c: _, h, w }) => {
                    if *out == 0 || *kernel == 0 || *stride == 0 {
                        return Err(self.err(format!("layer {i}: degenerate conv")));
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(self.err(format!(
                            "layer {i}: kernel {kernel} does not fit {h}x{w} with pad {pad}"
                        )));
                    }
                    last_conv = Some(i);
                    LayerShape::Spatial {
                        c: *out,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    }
                }
                (LayerDesc::Relu, s @ LayerShape::Spatial { .. }) => s,
                (LayerDesc::Relu, s @ LayerShape::Flat { .. }) => s,
                (LayerDesc::MaxPool2, LayerShape::Spatial { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(self.err(format!("layer {i}: cannot pool {h}x{w}")));
                    }
                    LayerShape::Spatial { c, h: h / 2, w: w / 2 }
                }
                (LayerDesc::Residual { channels }, LayerShape::Spatial { c, h, w }) => {
                    if *channels != c {
                        return Err(self.err(format!(
                            "layer {i}: residual expects {channels} channels, stream has {c}"
                        )));
                    }
                    if h < 3 || w < 3 {
                        return Err(self.err(format!("layer {i}: residual needs 3x3 room")));
                    }
                    last_conv = Some(i);
                    LayerShape::Spatial { c, h, w }
                }
                (LayerDesc::Flatten, LayerShape::Spatial { c, h, w }) => {
                    flatten_at = Some(i);
                    LayerShape::Flat { n: c * h * w }
                }
                (LayerDesc::Dense { out }, LayerShape::Flat { n }) => {
                    if *out == 0 || n == 0 {
                        return Err(self.err(format!("layer {i}: degenerate dense")));
                    }
                    LayerShape::Flat { n: *out }
                }
                (l, s) => {
                    return Err(self.err(format!("layer {i}: {l:?} cannot follow {s:?}")));
                }
            };
            shapes.push(cur);
        }
        match shapes.last() {
            Some(LayerShape::Flat { n }) if *n == self.num_classes => {}
            other => {
                return Err(self.err(format!(
                    "final layer must emit {} logits, got {other:?}",
                    self.num_classes
                )));
            }
        }
        let Some(last_conv) = last_conv else {
            return Err(self.err("no convolutional layers".into()));
        };
        let flatten_at = flatten_at.ok_or_else(|| self.err("missing flatten".into()))?;
        if self.taps.is_empty() {
            return Err(self.err("at least one tap required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for tap in &self.taps {
            if tap.layer >= self.layers.len() {
                return Err(self.err(format!("tap {} points past the stack", tap.name)));
            }
            if tap.layer >= flatten_at {
                return Err(self.err(format!("tap {} must sit before flatten", tap.name)));
            }
            if !seen.insert(tap.name.as_str()) {
                return Err(self.err(format!("duplicate tap name {}", tap.name)));
            }
        }
        if !self.taps.iter().any(|t| t.layer >= last_conv) {
            return Err(self.err("no tap in the final convolutional stage".into()));
        }
        Ok(shapes)
    }

    pub fn tap(&self, name: &str) -> Option<&Tap> {
        self.taps.iter().find(|t| t.name == name)
    }

    /// Activation shape (c, h, w) at a named tap.
    pub fn tap_shape(&self, name: &str) -> Result<(usize, usize, usize), VictimError> {
        let tap = self
            .tap(name)
            .ok_or_else(|| self.err(format!("unknown tap {name}")))?;
        match self.infer_shapes()?[tap.layer] {
            LayerShape::Spatial { c, h, w } => Ok((c, h, w)),
            LayerShape::Flat { .. } => Err(self.err(format!("tap {name} is not spatial"))),
        }
    }

    /// Named parameter tensors in forward order.
    pub fn param_layout(&self) -> Result<Vec<(String, Vec<usize>)>, VictimError> {
        let mut out = Vec::new();
        let (mut c, _, _) = self.input;
        let shapes = self.infer_shapes()?;
        let mut flat_in = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerDesc::Conv { out: f, kernel, .. } => {
                    out.push((format!("l{i:02}.w"), vec![*f, c, *kernel, *kernel]));
                    out.push((format!("l{i:02}.b"), vec![*f]));
                }
                LayerDesc::Residual { channels } => {
                    out.push((format!("l{i:02}.w1"), vec![*channels, *channels, 3, 3]));
                    out.push((format!("l{i:02}.b1"), vec![*channels]));
                    out.push((format!("l{i:02}.w2"), vec![*channels, *channels, 3, 3]));
                    out.push((format!("l{i:02}.b2"), vec![*channels]));
                }
                LayerDesc::Dense { out: o } => {
                    out.push((format!("l{i:02}.w"), vec![flat_in, *o]));
                    out.push((format!("l{i:02}.b"), vec![*o]));
                }
                _ => {}
            }
            match shapes[i] {
                LayerShape::Spatial { c: cc, .. } => c = cc,
                LayerShape::Flat { n } => flat_in = n,
            }
        }
        Ok(out)
    }

    /// He-normal initialization in layout order.
    pub fn init_params(&self, rng: &mut impl rand::Rng) -> Result<Vec<Tensor>, VictimError> {
        let layout = self.param_layout()?;
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                params.push(Tensor::zeros(shape));
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                params.push(Tensor::random_normal(shape, rng, 0.0, std));
            }
        }
        Ok(params)
    }

    /// Builds the forward graph. `params` must follow [`Self::param_layout`].
    /// Returns one node per layer plus the logits.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        input: NodeId,
        params: &[NodeId],
    ) -> Result<ForwardTrace, VictimError> {
        let mut p = params.iter().copied();
        let mut next = |msg: &str| -> Result<NodeId, VictimError> {
            p.next()
                .ok_or_else(|| self.err(format!("missing parameter node for {msg}")))
        };
        let mut cur = input;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerDesc::Conv { out, kernel: _, stride, pad } => {
                    let w = next("conv.w")?;
                    let b = next("conv.b")?;
                    let conv = g.conv2d(cur, w, *stride, *pad)?;
                    let b4 = g.reshape(b, &[1, *out, 1, 1])?;
                    g.add(conv, b4)?
                }
                LayerDesc::Relu => g.relu(cur)?,
                LayerDesc::MaxPool2 => g.max_pool2(cur)?,
                LayerDesc::Residual { channels } => {
                    let w1 = next("residual.w1")?;
                    let b1 = next("residual.b1")?;
                    let w2 = next("residual.w2")?;
                    let b2 = next("residual.b2")?;
                    let c1 = g.conv2d(cur, w1, 1, 1)?;
                    let b1r = g.reshape(b1, &[1, *channels, 1, 1])?;
                    let c1b = g.add(c1, b1r)?;
                    let a1 = g.relu(c1b)?;
                    let c2 = g.conv2d(a1, w2, 1, 1)?;
                    let b2r = g.reshape(b2, &[1, *channels, 1, 1])?;
                    let c2b = g.add(c2, b2r)?;
                    let sum = g.add(cur, c2b)?;
                    g.relu(sum)?
                }
                LayerDesc::Flatten => {
                    let s = g.value(cur).shape().to_vec();
                    g.reshape(cur, &[s[0], s[1] * s[2] * s[3]])?
                }
                LayerDesc::Dense { .. } => {
                    let w = next("dense.w")?;
                    let b = next("dense.b")?;
                    let mm = g.matmul(cur, w)?;
                    g.add(mm, b)?
                }
            };
            let _ = i;
            layer_outputs.push(cur);
        }
        if p.next().is_some() {
            return Err(self.err("too many parameter nodes".into()));
        }
        Ok(ForwardTrace {
            logits: cur,
            layer_outputs,
        })
    }
}

/// Node handles produced by one forward build.
pub struct ForwardTrace {
    pub logits: NodeId,
    pub layer_outputs: Vec<NodeId>,
}

impl ForwardTrace {
    /// Node at a named tap.
    pub fn tap(&self, spec: &ArchitectureSpec, name: &str) -> Option<NodeId> {
        spec.tap(name).map(|t| self.layer_outputs[t.layer])
    }
}

/// Provenance of a trained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub dataset_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// A trained victim: architecture, weights, label table and provenance.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ArchitectureSpec,
    pub params: Vec<Tensor>,
    pub class_names: Vec<String>,
    pub fingerprint: Fingerprint,
}

impl Classifier {
    /// Builds the frozen forward graph on top of an existing input node.
    /// Weights enter as constants, so gradients flow to the image only.
    pub fn forward_frozen(
        &self,
        g: &mut Graph,
        input: NodeId,
    ) -> Result<ForwardTrace, VictimError> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(g.input(p.clone())?);
        }
        self.spec.build_forward(g, input, &ids)
    }

    fn check_batch(&self, images: &Tensor) -> Result<(), VictimError> {
        let (c, h, w) = self.spec.input;
        if images.rank() != 4
            || images.shape()[1] != c
            || images.shape()[2] != h
            || images.shape()[3] != w
        {
            return Err(VictimError::Arch {
                name: self.spec.name.clone(),
                msg: format!(
                    "expected image batch [n, {c}, {h}, {w}], got {:?}",
                    images.shape()
                ),
            });
        }
        Ok(())
    }

    /// Raw logits for an NCHW batch.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor, VictimError> {
        self.check_batch(images)?;
        let mut g = Graph::new();
        let input = g.input(images.clone())?;
        let trace = self.forward_frozen(&mut g, input)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Softmax probabilities `[n, classes]`; a pure function of
    /// (weights, images).
    pub fn predict(&self, images: &Tensor) -> Result<Tensor, VictimError> {
        Ok(crate::tensor::kernels::softmax_rows(&self.logits(images)?))
    }

    /// Argmax labels; ties resolve to the lowest class index.
    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<usize>, VictimError> {
        let logits = self.logits(images)?;
        let c = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(c)
            .map(argmax)
            .collect())
    }

    /// Activations at one named tap for an NCHW batch.
    pub fn activations(&self, images: &Tensor, tap: &str) -> Result<Tensor, VictimError> {
        Ok(self.activations_at(images, &[tap])?.pop().expect("one tap"))
    }

    /// Activations at several taps from a single forward pass.
    pub fn activations_at(
        &self,
        images: &Tensor,
        taps: &[&str],
    ) -> Result<Vec<Tensor>, VictimError> {
        self.check_batch(images)?;
        let mut g = Graph::new();
        let input = g.input(images.clone())?;
        let trace = self.forward_frozen(&mut g, input)?;
        let mut out = Vec::with_capacity(taps.len());
        for name in taps {
            let node = trace.tap(&self.spec, name).ok_or_else(|| VictimError::Arch {
                name: self.spec.name.clone(),
                msg: format!("unknown tap {name}"),
            })?;
            out.push(g.value(node).clone());
        }
        Ok(out)
    }
}

/// Index of the row maximum; first occurrence wins.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

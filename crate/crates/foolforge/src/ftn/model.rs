//! Transfer-net architecture: strided encoder, conditioned residual
//! decoder, and the two-layer conditioner that turns bank statistics into
//! per-channel normalization parameters.

use rand::Rng;

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

use super::{FtnConfig, FtnError, RepresentationBank};

/// Variance floor inside the conditioned normalization layers.
pub const ADAIN_EPS: f64 = 1e-5;

/// A trained (or freshly initialized) transfer net bound to the bank it
/// conditions on.
#[derive(Debug, Clone)]
pub struct FtnModel {
    pub config: FtnConfig,
    /// Victim input shape `(c, h, w)`; the net maps this shape to itself.
    pub input: (usize, usize, usize),
    /// Parameters in [`FtnModel::param_layout`] order.
    pub params: Vec<Tensor>,
    pub bank: RepresentationBank,
}

impl FtnModel {
    /// Named parameter shapes in initialization order.
    pub fn param_layout(
        config: &FtnConfig,
        input: (usize, usize, usize),
        bank_width: usize,
    ) -> Result<Vec<(String, Vec<usize>)>, FtnError> {
        config.validate()?;
        let (c, h, w) = input;
        if c != 3 {
            return Err(FtnError::Config {
                msg: format!("transfer net is built for 3-channel images, got {c}"),
            });
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(FtnError::Config {
                msg: format!("input {h}x{w} must be divisible by the 4x downsampling"),
            });
        }
        let (c1, c2) = config.enc_channels;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("enc00.w".into(), vec![c1, 3, 3, 3]),
            ("enc00.b".into(), vec![c1]),
            ("enc01.w".into(), vec![c2, c1, 3, 3]),
            ("enc01.b".into(), vec![c2]),
        ];
        for i in 0..config.enc_residual_blocks {
            out.push((format!("enc_res{i}.w1"), vec![c2, c2, 3, 3]));
            out.push((format!("enc_res{i}.b1"), vec![c2]));
            out.push((format!("enc_res{i}.w2"), vec![c2, c2, 3, 3]));
            out.push((format!("enc_res{i}.b2"), vec![c2]));
        }
        for i in 0..config.adain_blocks {
            out.push((format!("dec_ada{i}.w1"), vec![c2, c2, 3, 3]));
            out.push((format!("dec_ada{i}.b1"), vec![c2]));
            out.push((format!("dec_ada{i}.w2"), vec![c2, c2, 3, 3]));
            out.push((format!("dec_ada{i}.b2"), vec![c2]));
        }
        out.push(("dec_up0.w".into(), vec![c2, c1, 4, 4]));
        out.push(("dec_up0.b".into(), vec![c1]));
        out.push(("dec_up1.w".into(), vec![c1, 3, 4, 4]));
        out.push(("dec_up1.b".into(), vec![3]));
        let total = config.adain_channels_total();
        out.push(("mlp.w1".into(), vec![2 * bank_width, config.mlp_hidden]));
        out.push(("mlp.b1".into(), vec![config.mlp_hidden]));
        out.push(("mlp.w2".into(), vec![config.mlp_hidden, 2 * total]));
        out.push(("mlp.b2".into(), vec![2 * total]));
        Ok(out)
    }

    /// Fresh model: He-normal convolutions, zero biases, and a conditioner
    /// whose last layer outputs exactly (scale 1, bias 0), so the decoder
    /// starts as plain instance normalization.
    pub fn init(
        config: FtnConfig,
        input: (usize, usize, usize),
        bank: RepresentationBank,
        rng: &mut impl Rng,
    ) -> Result<Self, FtnError> {
        let layout = Self::param_layout(&config, input, bank.width())?;
        let total = config.adain_channels_total();
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let t = if name == "mlp.w2" {
                Tensor::zeros(shape)
            } else if name == "mlp.b2" {
                let mut v = vec![1.0; total];
                v.extend(vec![0.0; total]);
                Tensor::new(shape, v)?
            } else if name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2") {
                let fan_in: usize = if name.starts_with("mlp.") {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                Tensor::random_normal(shape, rng, 0.0, (2.0 / fan_in as f64).sqrt())
            } else {
                Tensor::zeros(shape)
            };
            params.push(t);
        }
        Ok(Self { config, input, params, bank })
    }

    /// Builds the net on existing parameter nodes. `input` is `[n, 3, h, w]`
    /// and `stats` is the `[1, 2d]` bank-statistics row; the result is an
    /// image batch of the input shape, bounded by the sigmoid head.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        input: NodeId,
        stats: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (c1, c2) = self.config.enc_channels;
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("layout-sized parameter list");

        let conv =
            |g: &mut Graph, x, w, b, stride, ch| -> Result<NodeId, TensorError> {
                let y = g.conv2d(x, w, stride, 1)?;
                let br = g.reshape(b, &[1, ch, 1, 1])?;
                g.add(y, br)
            };

        let mut x = conv(g, input, next(), next(), 2, c1)?;
        x = g.relu(x)?;
        x = conv(g, x, next(), next(), 2, c2)?;
        x = g.relu(x)?;
        for _ in 0..self.config.enc_residual_blocks {
            let y = conv(g, x, next(), next(), 1, c2)?;
            let y = g.relu(y)?;
            let y = conv(g, y, next(), next(), 1, c2)?;
            let sum = g.add(x, y)?;
            x = g.relu(sum)?;
        }

        let dec_params: Vec<NodeId> = (0..self.config.adain_blocks * 4).map(|_| next()).collect();
        let up_params: Vec<NodeId> = (0..4).map(|_| next()).collect();
        let (w1, b1, w2, b2) = (next(), next(), next(), next());

        let h1 = g.matmul(stats, w1)?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1)?;
        let cond = g.matmul(h1, w2)?;
        let cond = g.add(cond, b2)?;
        let total = self.config.adain_channels_total();
        let cond = g.reshape(cond, &[2 * total])?;

        for i in 0..self.config.adain_blocks {
            let (bw1, bb1, bw2, bb2) = (
                dec_params[4 * i],
                dec_params[4 * i + 1],
                dec_params[4 * i + 2],
                dec_params[4 * i + 3],
            );
            let scale_a = g.slice1d(cond, (2 * i) * c2, c2)?;
            let bias_a = g.slice1d(cond, total + (2 * i) * c2, c2)?;
            let scale_b = g.slice1d(cond, (2 * i + 1) * c2, c2)?;
            let bias_b = g.slice1d(cond, total + (2 * i + 1) * c2, c2)?;
            let t = conv(g, x, bw1, bb1, 1, c2)?;
            let t = g.adain(t, scale_a, bias_a, ADAIN_EPS)?;
            let t = g.relu(t)?;
            let t = conv(g, t, bw2, bb2, 1, c2)?;
            let t = g.adain(t, scale_b, bias_b, ADAIN_EPS)?;
            x = g.add(x, t)?;
        }

        let t = g.conv_transpose2d(x, up_params[0], 2, 1)?;
        let br = g.reshape(up_params[1], &[1, c1, 1, 1])?;
        let t = g.add(t, br)?;
        let t = g.relu(t)?;
        let t = g.conv_transpose2d(t, up_params[2], 2, 1)?;
        let br = g.reshape(up_params[3], &[1, 3, 1, 1])?;
        let t = g.add(t, br)?;
        g.sigmoid(t)
    }

    pub(crate) fn check_batch(&self, images: &Tensor) -> Result<(), FtnError> {
        let (c, h, w) = self.input;
        if images.rank() != 4
            || images.shape()[1] != c
            || images.shape()[2] != h
            || images.shape()[3] != w
        {
            return Err(FtnError::Config {
                msg: format!(
                    "expected image batch [n, {c}, {h}, {w}], got {:?}",
                    images.shape()
                ),
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FtnError::Config {
                msg: "input images must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Bank-statistics row shaped for the conditioner.
    pub fn stats_row(&self) -> Result<Tensor, FtnError> {
        let d = self.bank.width();
        Ok(self.bank.stats().reshaped(&[1, 2 * d])?)
    }

    /// Deterministic inference on an `[n, 3, h, w]` batch in [0, 1].
    pub fn forward(&self, images: &Tensor) -> Result<Tensor, FtnError> {
        self.check_batch(images)?;
        let mut g = Graph::new();
        let input = g.input(images.clone())?;
        let stats = g.input(self.stats_row()?)?;
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(g.input(p.clone())?);
        }
        let out = self.build_forward(&mut g, &ids, input, stats)?;
        Ok(g.value(out).clone())
    }

    /// Evaluates the conditioner on the bound bank: per-channel scales and
    /// biases, each of length [`FtnConfig::adain_channels_total`].
    pub fn condition_params(&self) -> Result<(Tensor, Tensor), FtnError> {
        let stats = self.stats_row()?;
        let n = self.params.len();
        let (w1, b1, w2, b2) = (
            &self.params[n - 4],
            &self.params[n - 3],
            &self.params[n - 2],
            &self.params[n - 1],
        );
        if w1.shape()[0] != stats.shape()[1] {
            return Err(FtnError::Bank {
                msg: format!(
                    "conditioner expects width {}, bank statistics have {}",
                    w1.shape()[0],
                    stats.shape()[1]
                ),
            });
        }
        let mut g = Graph::new();
        let s = g.input(stats)?;
        let w1 = g.input(w1.clone())?;
        let b1 = g.input(b1.clone())?;
        let w2 = g.input(w2.clone())?;
        let b2 = g.input(b2.clone())?;
        let h1 = g.matmul(s, w1)?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1)?;
        let cond = g.matmul(h1, w2)?;
        let cond = g.add(cond, b2)?;
        let total = self.config.adain_channels_total();
        let flat = g.reshape(cond, &[2 * total])?;
        let scales = g.slice1d(flat, 0, total)?;
        let biases = g.slice1d(flat, total, total)?;
        Ok((g.value(scales).clone(), g.value(biases).clone()))
    }
}

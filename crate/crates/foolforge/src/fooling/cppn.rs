//! Coordinate networks: genomes mapping pixel position to color, rendered
//! through the graph so both gradient and evolutionary routes share one
//! forward definition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use crate::victims::Classifier;

use super::{clean_confidence, check_target, FoolingConfig, FoolingError, FoolingImage, TracePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CppnActivation {
    Sin,
    Sigmoid,
    Tanh,
    Gauss,
}

impl CppnActivation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        match self {
            CppnActivation::Sin => g.sin(x),
            CppnActivation::Sigmoid => g.sigmoid(x),
            CppnActivation::Tanh => g.tanh(x),
            CppnActivation::Gauss => g.gauss(x),
        }
    }
}

/// One fully connected genome layer: `act(weight x + bias)` with `weight`
/// of shape `[out, in]` and `bias` of shape `[out, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CppnLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: CppnActivation,
}

impl CppnLayer {
    fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// A layered coordinate network from (x, y, r) to RGB. The output layer is
/// always sigmoid, so renders live in [0, 1] by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CppnGenome {
    pub layers: Vec<CppnLayer>,
}

impl CppnGenome {
    pub const INPUTS: usize = 3;
    pub const OUTPUTS: usize = 3;
    /// Small default topology; hidden activations alternate sin and tanh.
    pub const DEFAULT_HIDDEN: [usize; 3] = [16, 16, 16];

    /// Random genome with the given hidden widths. Weights are normal with
    /// standard deviation `1/sqrt(fan_in)`, biases zero.
    pub fn random(rng: &mut impl Rng, hidden: &[usize]) -> Self {
        let mut widths = vec![Self::INPUTS];
        widths.extend_from_slice(hidden);
        widths.push(Self::OUTPUTS);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let activation = if i == widths.len() - 2 {
                CppnActivation::Sigmoid
            } else if i % 2 == 0 {
                CppnActivation::Sin
            } else {
                CppnActivation::Tanh
            };
            layers.push(CppnLayer {
                weight: Tensor::random_normal(
                    &[fan_out, fan_in],
                    rng,
                    0.0,
                    1.0 / (fan_in as f64).sqrt(),
                ),
                bias: Tensor::zeros(&[fan_out, 1]),
                activation,
            });
        }
        Self { layers }
    }

    /// Layer widths from input to output, e.g. `[3, 16, 16, 16, 3]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(CppnLayer::fan_out));
        w
    }

    pub fn validate(&self) -> Result<(), FoolingError> {
        let fail = |msg: String| Err(FoolingError::Config { msg });
        if self.layers.is_empty() {
            return fail("genome needs at least one layer".into());
        }
        if self.layers[0].fan_in() != Self::INPUTS {
            return fail(format!("input width {} != 3", self.layers[0].fan_in()));
        }
        let last = self.layers.last().expect("nonempty");
        if last.fan_out() != Self::OUTPUTS || last.activation != CppnActivation::Sigmoid {
            return fail("output layer must be 3-wide sigmoid".into());
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[1].fan_in() != pair[0].fan_out() {
                return fail(format!(
                    "layer {} out {} != layer {} in {}",
                    i,
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != [l.fan_out(), 1] {
                return fail(format!("layer {i} bias shape {:?}", l.bias.shape()));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return fail(format!("layer {i} has non-finite weights"));
            }
        }
        Ok(())
    }

    /// Weight and bias tensors interleaved per layer, the order expected by
    /// [`CppnGenome::build_render`].
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out
    }

    /// Builds the render graph on existing parameter nodes (weight, bias
    /// per layer, in order) and returns a `[1, 3, h, w]` image node.
    pub fn build_render(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        if params.len() != self.layers.len() * 2 {
            return Err(TensorError::Invalid {
                op: "cppn_render",
                msg: format!(
                    "expected {} parameter nodes, got {}",
                    self.layers.len() * 2,
                    params.len()
                ),
            });
        }
        let mut cur = g.input(coordinate_map(h, w))?;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = g.matmul(params[2 * i], cur)?;
            let biased = g.add(pre, params[2 * i + 1])?;
            cur = layer.activation.apply(g, biased)?;
        }
        g.reshape(cur, &[1, Self::OUTPUTS, h, w])
    }

    /// Renders the genome at a resolution. Same genome, same resolution:
    /// bit-identical output.
    pub fn render(&self, h: usize, w: usize) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            ids.push(g.input(l.weight.clone())?);
            ids.push(g.input(l.bias.clone())?);
        }
        let out = self.build_render(&mut g, &ids, h, w)?;
        g.value(out).reshaped(&[Self::OUTPUTS, h, w])
    }

    /// Rebuilds the genome with new weight values in `param_tensors` order,
    /// keeping the activation tags.
    pub fn with_params(&self, params: &[Tensor]) -> Result<Self, FoolingError> {
        if params.len() != self.layers.len() * 2 {
            return Err(FoolingError::Config {
                msg: format!(
                    "expected {} tensors, got {}",
                    self.layers.len() * 2,
                    params.len()
                ),
            });
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| CppnLayer {
                weight: params[2 * i].clone(),
                bias: params[2 * i + 1].clone(),
                activation: l.activation,
            })
            .collect();
        let out = Self { layers };
        out.validate()?;
        Ok(out)
    }

    /// Gaussian weight perturbation plus, with probability
    /// `structural_rate`, one new hidden unit whose outgoing weights start
    /// at zero so the render is unchanged at birth.
    pub fn mutate(&self, rng: &mut impl Rng, sigma: f64, structural_rate: f64) -> Self {
        let mut layers: Vec<CppnLayer> = self
            .layers
            .iter()
            .map(|l| {
                let dw = Tensor::random_normal(l.weight.shape(), rng, 0.0, sigma);
                let db = Tensor::random_normal(l.bias.shape(), rng, 0.0, sigma);
                let mut weight = l.weight.clone();
                for (v, d) in weight.data_mut().iter_mut().zip(dw.data()) {
                    *v += d;
                }
                let mut bias = l.bias.clone();
                for (v, d) in bias.data_mut().iter_mut().zip(db.data()) {
                    *v += d;
                }
                CppnLayer { weight, bias, activation: l.activation }
            })
            .collect();
        if layers.len() >= 2 && rng.random_bool(structural_rate) {
            let li = rng.random_range(0..layers.len() - 1);
            grow_unit(&mut layers, li, rng);
        }
        Self { layers }
    }
}

/// Adds one unit to hidden layer `li`: a random incoming row and a zero
/// outgoing column in the next layer.
fn grow_unit(layers: &mut [CppnLayer], li: usize, rng: &mut impl Rng) {
    let (fan_in, fan_out) = (layers[li].fan_in(), layers[li].fan_out());
    let incoming = Tensor::random_normal(&[1, fan_in], rng, 0.0, 1.0 / (fan_in as f64).sqrt());
    let mut wdata = layers[li].weight.data().to_vec();
    wdata.extend_from_slice(incoming.data());
    layers[li].weight = Tensor::new(&[fan_out + 1, fan_in], wdata).expect("row append");
    let mut bdata = layers[li].bias.data().to_vec();
    bdata.push(0.0);
    layers[li].bias = Tensor::new(&[fan_out + 1, 1], bdata).expect("bias append");

    let next = &layers[li + 1];
    let (nout, nin) = (next.fan_out(), next.fan_in());
    let mut grown = Vec::with_capacity(nout * (nin + 1));
    for row in next.weight.data().chunks_exact(nin) {
        grown.extend_from_slice(row);
        grown.push(0.0);
    }
    layers[li + 1].weight = Tensor::new(&[nout, nin + 1], grown).expect("column append");
}

/// Position features for an `h` by `w` grid as a `[3, h*w]` matrix: rows
/// are x, y in [-1, 1] at pixel centers and the radius `sqrt(x^2 + y^2)`.
pub fn coordinate_map(h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..h {
        let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
        for j in 0..w {
            let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
            let p = i * w + j;
            data[p] = x;
            data[n + p] = y;
            data[2 * n + p] = (x * x + y * y).sqrt();
        }
    }
    Tensor::new(&[3, n], data).expect("coordinate map")
}

/// Elitist truncation evolution over genomes; fitness is the victim's
/// target probability of the rendered image. The best genome always
/// survives, so best fitness never decreases across generations.
pub(crate) fn evolve(
    victim: &Classifier,
    cfg: &FoolingConfig,
) -> Result<FoolingImage, FoolingError> {
    check_target(victim, cfg)?;
    let (c, h, w) = victim.spec.input;
    if c != 3 {
        return Err(FoolingError::Config {
            msg: format!("coordinate network renders 3 channels, victim wants {c}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fitness = |genome: &CppnGenome| -> Result<f64, FoolingError> {
        clean_confidence(victim, &genome.render(h, w)?, cfg.target)
    };

    let mut pop: Vec<(CppnGenome, f64)> = Vec::with_capacity(cfg.population);
    for _ in 0..cfg.population {
        let genome = CppnGenome::random(&mut rng, &CppnGenome::DEFAULT_HIDDEN);
        let f = fitness(&genome)?;
        pop.push((genome, f));
    }

    let mut trace = Vec::with_capacity(cfg.steps);
    for generation in 0..cfg.steps {
        pop.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best = pop[0].1;
        trace.push(TracePoint {
            step: generation,
            loss: -best.max(f64::MIN_POSITIVE).ln(),
            confidence: best,
        });
        pop.truncate(cfg.elites);
        while pop.len() < cfg.population {
            let parent = rng.random_range(0..cfg.elites.min(pop.len()));
            let child = pop[parent]
                .0
                .mutate(&mut rng, cfg.mutation_sigma, cfg.structural_rate);
            let f = fitness(&child)?;
            pop.push((child, f));
        }
    }
    pop.sort_by(|a, b| b.1.total_cmp(&a.1));
    let image = pop[0].0.render(h, w)?;
    let confidence = clean_confidence(victim, &image, cfg.target)?;
    Ok(FoolingImage {
        image,
        method: cfg.method,
        target: cfg.target,
        confidence,
        trace,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::test_support::tiny_victim;
    use super::super::{fool_cppn_ea, FoolingConfig, FoolingMethod};
    use super::*;

    fn zero_genome() -> CppnGenome {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = CppnGenome::random(&mut rng, &[4, 4]);
        for l in &mut g.layers {
            for v in l.weight.data_mut() {
                *v = 0.0;
            }
        }
        g
    }

    #[test]
    fn zero_weights_render_a_constant_half_image() {
        let img = zero_genome().render(6, 5).unwrap();
        assert_eq!(img.shape(), &[3, 6, 5]);
        for &v in img.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn renders_are_bit_identical_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = CppnGenome::random(&mut rng, &CppnGenome::DEFAULT_HIDDEN);
        g.validate().unwrap();
        let a = g.render(12, 12).unwrap();
        let b = g.render(12, 12).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn render_is_resolution_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = CppnGenome::random(&mut rng, &CppnGenome::DEFAULT_HIDDEN);
        let small = g.render(16, 16).unwrap();
        let large = g.render(32, 32).unwrap();
        let mut diff = 0.0;
        for c in 0..3 {
            for i in 0..16 {
                for j in 0..16 {
                    let mut avg = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            avg += large.data()[(c * 32 + 2 * i + di) * 32 + 2 * j + dj];
                        }
                    }
                    avg /= 4.0;
                    diff += (avg - small.data()[(c * 16 + i) * 16 + j]).abs();
                }
            }
        }
        diff /= (3 * 16 * 16) as f64;
        assert!(diff < 0.05, "mean abs cross-resolution difference {diff}");
    }

    #[test]
    fn genome_widths_and_param_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = CppnGenome::random(&mut rng, &[5, 7]);
        assert_eq!(g.widths(), vec![3, 5, 7, 3]);
        let rebuilt = g.with_params(&g.param_tensors()).unwrap();
        assert_eq!(g, rebuilt);
    }

    #[test]
    fn structural_mutation_grows_a_unit_without_changing_the_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = CppnGenome::random(&mut rng, &[4, 4]);
        let before = g.render(8, 8).unwrap();
        let child = g.mutate(&mut rng, 0.0, 1.0);
        child.validate().unwrap();
        let widths = child.widths();
        assert_eq!(widths.iter().sum::<usize>(), g.widths().iter().sum::<usize>() + 1);
        let after = child.render(8, 8).unwrap();
        assert_eq!(before, after, "zero outgoing weights keep the render");
    }

    #[test]
    fn weight_mutation_with_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = CppnGenome::random(&mut rng, &[4]);
        let child = g.mutate(&mut rng, 0.0, 0.0);
        assert_eq!(g, child);
    }

    #[test]
    fn evolution_best_fitness_never_decreases() {
        let victim = tiny_victim(2);
        let cfg = FoolingConfig {
            steps: 8,
            population: 6,
            elites: 2,
            mutation_sigma: 0.3,
            structural_rate: 0.2,
            ..FoolingConfig::for_method(FoolingMethod::CppnEa, 1, 13)
        };
        let out = fool_cppn_ea(&victim, &cfg).unwrap();
        assert_eq!(out.trace.len(), 8);
        for pair in out.trace.windows(2) {
            assert!(
                pair[1].confidence >= pair[0].confidence,
                "fitness dropped: {pair:?}"
            );
        }
        assert!(out.confidence >= out.trace.last().unwrap().confidence);
        assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_genome_with_zero_mutation_keeps_constant_fitness() {
        let victim = tiny_victim(2);
        let cfg = FoolingConfig {
            steps: 5,
            population: 1,
            elites: 1,
            mutation_sigma: 0.0,
            structural_rate: 0.0,
            ..FoolingConfig::for_method(FoolingMethod::CppnEa, 1, 13)
        };
        let out = fool_cppn_ea(&victim, &cfg).unwrap();
        let first = out.trace[0].confidence;
        assert!(out.trace.iter().all(|t| t.confidence == first));
    }

    #[test]
    fn evolution_is_deterministic_in_the_seed() {
        let victim = tiny_victim(2);
        let cfg = FoolingConfig {
            steps: 4,
            population: 5,
            elites: 2,
            ..FoolingConfig::for_method(FoolingMethod::CppnEa, 1, 21)
        };
        let a = fool_cppn_ea(&victim, &cfg).unwrap();
        let b = fool_cppn_ea(&victim, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.confidence.to_bits(), b.confidence.to_bits());
    }
}

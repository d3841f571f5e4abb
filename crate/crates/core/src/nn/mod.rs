//! Dense fixed-point networks: forward pass with an activation tape,
//! backpropagation through transposed MVMs, and fixed-point Adam.

mod activation;
mod adam;
pub mod mvm;

pub use activation::{apply_activation, relu, tanh, Activation};
pub use adam::{AdamConfig, AdamState};

use serde::{Deserialize, Serialize};

use crate::fixnum::{Fx16, Fx32, Precision, Quantizer};
use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<Fx32>,
    bias: Vec<Fx32>,
    activation: Activation,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<Fx32>, bias: Vec<Fx32>, activation: Activation) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "layer weights",
                expected: rows * cols,
                found: weights.len(),
            });
        }
        if bias.len() != rows {
            return Err(Error::ShapeMismatch {
                context: "layer bias",
                expected: rows,
                found: bias.len(),
            });
        }
        Ok(Layer {
            rows,
            cols,
            weights,
            bias,
            activation,
        })
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization for weights and biases.
    pub fn random(rows: usize, cols: usize, activation: Activation, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let mut draw = || Fx32::from_real(rng.uniform(-bound, bound));
        let weights = (0..rows * cols).map(|_| draw()).collect();
        let bias = (0..rows).map(|_| draw()).collect();
        Layer {
            rows,
            cols,
            weights,
            bias,
            activation,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[Fx32] {
        &self.weights
    }

    pub fn bias(&self) -> &[Fx32] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self, row: usize, col: usize) -> Fx32 {
        self.weights[row * self.cols + col]
    }

    pub fn weights_mut(&mut self) -> &mut [Fx32] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [Fx32] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

/// Activation precision for one forward pass. Half precision carries one
/// frozen quantizer per layer, applied to that layer's input.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Full32,
    Half16(&'a [Quantizer]),
}

impl ForwardMode<'_> {
    pub fn precision(&self) -> Precision {
        match self {
            ForwardMode::Full32 => Precision::Full32,
            ForwardMode::Half16(_) => Precision::Half16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRecord {
    /// Input as the MVM saw it (dequantized in half precision).
    pub input: Vec<Fx32>,
    /// Stored 16-bit input codes, half precision only.
    pub codes: Option<Vec<Fx16>>,
    pub pre: Vec<Fx32>,
    pub output: Vec<Fx32>,
    /// Extrema of the raw layer input, before any quantization.
    pub min: Fx32,
    pub max: Fx32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationTape {
    pub precision: Precision,
    pub layers: Vec<LayerRecord>,
}

impl ActivationTape {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn output(&self) -> &[Fx32] {
        self.layers.last().map_or(&[], |l| &l.output)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub weights: Vec<Fx32>,
    pub bias: Vec<Fx32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gradients {
    pub params: ParamGrads,
    /// Error with respect to the network input.
    pub input: Vec<Fx32>,
}

/// Exact sums of raw `error * activation` products over a batch. Dividing by
/// the sample count happens once, in [`GradAccumulator::finish`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradAccumulator {
    weights: Vec<Vec<i64>>,
    bias: Vec<Vec<i64>>,
    count: u64,
}

impl GradAccumulator {
    pub fn new(net: &Network) -> Self {
        GradAccumulator {
            weights: net.layers.iter().map(|l| vec![0; l.rows * l.cols]).collect(),
            bias: net.layers.iter().map(|l| vec![0; l.rows]).collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn merge(mut self, other: GradAccumulator) -> GradAccumulator {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        self.count += other.count;
        self
    }

    /// Mean gradient, floor-rounded to Q16.16.
    pub fn finish(self) -> ParamGrads {
        let div = (self.count.max(1) as i64) << 16;
        let conv = |v: Vec<i64>| v.into_iter().map(|s| Fx32::saturate(s.div_euclid(div))).collect();
        ParamGrads {
            layers: self
                .weights
                .into_iter()
                .zip(self.bias)
                .map(|(w, b)| LayerGradient {
                    weights: conv(w),
                    bias: conv(b),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::ShapeMismatch {
                    context: "layer chaining",
                    expected: pair[0].rows,
                    found: pair[1].cols,
                });
            }
        }
        Ok(Network { layers })
    }

    /// Random MLP over `widths` (input first). Hidden layers use `hidden`,
    /// the last layer uses `output`.
    pub fn mlp(widths: &[usize], hidden: Activation, output: Activation, rng: &mut SplitMix64) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::random(w[1], w[0], if i + 1 == n { output } else { hidden }, rng))
            .collect();
        Network { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    /// Layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.first().map(|l| l.cols).into_iter().collect();
        w.extend(self.layers.iter().map(|l| l.rows));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn param_bytes(&self) -> usize {
        self.param_count() * 4
    }

    pub fn same_shape(&self, other: &Network) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols && a.activation == b.activation)
    }

    /// Parameters in checkpoint order: per layer, weights row-major then bias.
    pub fn params(&self) -> impl Iterator<Item = Fx32> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Fx32> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn forward(&self, input: &[Fx32], mode: ForwardMode<'_>) -> Result<(Vec<Fx32>, ActivationTape)> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        if let ForwardMode::Half16(qs) = mode {
            if qs.len() != self.layers.len() {
                return Err(Error::ShapeMismatch {
                    context: "quantizers per layer",
                    expected: self.layers.len(),
                    found: qs.len(),
                });
            }
        }
        let mut records = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let min = x.iter().copied().min().unwrap_or(Fx32::ZERO);
            let max = x.iter().copied().max().unwrap_or(Fx32::ZERO);
            let (pre, input, codes) = match mode {
                ForwardMode::Full32 => {
                    let pre = mvm::mvm(&layer.weights, layer.rows, layer.cols, &x, Some(&layer.bias));
                    (pre, x, None)
                }
                ForwardMode::Half16(qs) => {
                    let q = &qs[idx];
                    let codes: Vec<Fx16> = x.iter().map(|&a| q.quantize(a)).collect();
                    let pre = mvm::mvm_half(&layer.weights, layer.rows, layer.cols, &codes, q, Some(&layer.bias));
                    let deq = codes.iter().map(|&c| q.dequantize(c)).collect();
                    (pre, deq, Some(codes))
                }
            };
            let output = apply_activation(&pre, layer.activation);
            x = output.clone();
            records.push(LayerRecord {
                input,
                codes,
                pre,
                output,
                min,
                max,
            });
        }
        let tape = ActivationTape {
            precision: mode.precision(),
            layers: records,
        };
        Ok((x, tape))
    }

    /// Backpropagates `output_error` (dLoss/dOutput) through the taped pass.
    /// Weight and bias products are added to `sink` when given; the error
    /// with respect to the network input is returned.
    pub fn backprop(
        &self,
        tape: &ActivationTape,
        output_error: &[Fx32],
        mut sink: Option<&mut GradAccumulator>,
    ) -> Result<Vec<Fx32>> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "tape depth",
                expected: self.layers.len(),
                found: tape.layers.len(),
            });
        }
        if output_error.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "output error",
                expected: self.output_dim(),
                found: output_error.len(),
            });
        }
        let mut err = output_error.to_vec();
        for (idx, (layer, rec)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            if rec.pre.len() != layer.rows || rec.input.len() != layer.cols {
                return Err(Error::ShapeMismatch {
                    context: "tape layer",
                    expected: layer.rows,
                    found: rec.pre.len(),
                });
            }
            let delta: Vec<Fx32> = err
                .iter()
                .zip(rec.pre.iter().zip(&rec.output))
                .map(|(&e, (&p, &o))| layer.activation.backprop(e, p, o))
                .collect();
            if let Some(acc) = sink.as_deref_mut() {
                let (wacc, bacc) = (&mut acc.weights[idx], &mut acc.bias[idx]);
                for (i, &d) in delta.iter().enumerate() {
                    let d = d.raw() as i64;
                    if d == 0 {
                        continue;
                    }
                    bacc[i] += d << 16;
                    let row = &mut wacc[i * layer.cols..(i + 1) * layer.cols];
                    for (g, a) in row.iter_mut().zip(&rec.input) {
                        *g += d * a.raw() as i64;
                    }
                }
            }
            err = mvm::mvm_t(&layer.weights, layer.rows, layer.cols, &delta);
        }
        if let Some(acc) = sink {
            acc.count += 1;
        }
        Ok(err)
    }

    /// Single-sample gradients.
    pub fn backward(&self, tape: &ActivationTape, output_error: &[Fx32]) -> Result<Gradients> {
        let mut acc = GradAccumulator::new(self);
        let input = self.backprop(tape, output_error, Some(&mut acc))?;
        Ok(Gradients {
            params: acc.finish(),
            input,
        })
    }

    /// `self <- self + round(tau * (source - self))`, parameter-wise.
    pub fn soft_update_from(&mut self, source: &Network, tau: Fx32) {
        debug_assert!(self.same_shape(source));
        let tau = tau.raw() as i64;
        for (t, s) in self.params_mut().zip(source.params()) {
            let diff = s.raw() as i64 - t.raw() as i64;
            let step = (tau * diff + (1 << 15)) >> 16;
            *t = Fx32::saturate(t.raw() as i64 + step);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(v: &[f64]) -> Vec<Fx32> {
        v.iter().map(|&x| Fx32::from_real(x)).collect()
    }

    fn single(rows: usize, cols: usize, w: &[f64], act: Activation) -> Network {
        Network::new(vec![Layer::new(rows, cols, fx(w), vec![Fx32::ZERO; rows], act).unwrap()]).unwrap()
    }

    #[test]
    fn forward_examples() {
        let net = single(2, 2, &[1.0, 2.0, 3.0, 4.0], Activation::Identity);
        let (y, tape) = net.forward(&fx(&[5.0, 6.0]), ForwardMode::Full32).unwrap();
        assert_eq!(y, fx(&[17.0, 39.0]));
        assert_eq!(tape.depth(), 1);
        assert_eq!((tape.layers[0].min, tape.layers[0].max), (fx(&[5.0])[0], fx(&[6.0])[0]));

        let net = single(2, 2, &[1.0, 0.0, 0.0, 1.0], Activation::Relu);
        let (y, _) = net.forward(&fx(&[-1.0, 2.0]), ForwardMode::Full32).unwrap();
        assert_eq!(y, fx(&[0.0, 2.0]));
    }

    #[test]
    fn zero_actor_outputs_zero() {
        let mut rng = SplitMix64::new(1);
        let mut actor = Network::mlp(&[3, 8, 8, 2], Activation::Relu, Activation::Tanh, &mut rng);
        actor.params_mut().for_each(|p| *p = Fx32::ZERO);
        let (y, _) = actor.forward(&fx(&[0.3, -2.0, 5.0]), ForwardMode::Full32).unwrap();
        assert_eq!(y, vec![Fx32::ZERO; 2]);
    }

    #[test]
    fn shape_errors() {
        let net = single(2, 2, &[1.0, 2.0, 3.0, 4.0], Activation::Identity);
        assert!(matches!(
            net.forward(&fx(&[1.0]), ForwardMode::Full32),
            Err(Error::ShapeMismatch { .. })
        ));
        let (_, tape) = net.forward(&fx(&[1.0, 1.0]), ForwardMode::Full32).unwrap();
        assert!(matches!(
            net.backward(&tape, &fx(&[1.0])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            net.forward(&fx(&[1.0, 1.0]), ForwardMode::Half16(&[])),
            Err(Error::ShapeMismatch { .. })
        ));
        let a = Layer::random(4, 3, Activation::Relu, &mut SplitMix64::new(0));
        let b = Layer::random(2, 5, Activation::Relu, &mut SplitMix64::new(0));
        assert!(Network::new(vec![a, b]).is_err());
    }

    #[test]
    fn backward_examples() {
        let net = single(1, 1, &[0.75], Activation::Identity);
        let (_, tape) = net.forward(&fx(&[2.0]), ForwardMode::Full32).unwrap();
        let g = net.backward(&tape, &fx(&[3.0])).unwrap();
        assert_eq!(g.params.layers[0].weights, fx(&[6.0]));
        assert_eq!(g.params.layers[0].bias, fx(&[3.0]));
        assert_eq!(g.input, fx(&[2.25]));

        // Negative pre-activation kills the whole gradient row.
        let net = Network::new(vec![Layer::new(
            2,
            2,
            fx(&[1.0, 1.0, -1.0, -1.0]),
            fx(&[0.0, 0.0]),
            Activation::Relu,
        )
        .unwrap()])
        .unwrap();
        let (_, tape) = net.forward(&fx(&[1.0, 2.0]), ForwardMode::Full32).unwrap();
        let g = net.backward(&tape, &fx(&[1.0, 1.0])).unwrap();
        assert_eq!(g.params.layers[0].weights, fx(&[1.0, 2.0, 0.0, 0.0]));
        assert_eq!(g.params.layers[0].bias, fx(&[1.0, 0.0]));
    }

    #[test]
    fn batch_accumulator_averages_once() {
        let net = single(1, 1, &[1.0], Activation::Identity);
        let mut acc = GradAccumulator::new(&net);
        for (a, e) in [(1.0, 1.0), (1.0, -0.5), (0.5, 0.5)] {
            let (_, tape) = net.forward(&fx(&[a]), ForwardMode::Full32).unwrap();
            net.backprop(&tape, &fx(&[e]), Some(&mut acc)).unwrap();
        }
        let g = acc.finish();
        assert_eq!(g.layers[0].weights, fx(&[0.25]));
        assert_eq!(g.layers[0].bias, fx(&[1.0 / 3.0]));
    }

    #[test]
    fn half_forward_matches_full_on_dequantized_activations() {
        let mut rng = SplitMix64::new(9);
        for seed in 0..10 {
            let net = Network::mlp(
                &[5, 12, 7, 3],
                Activation::Relu,
                Activation::Tanh,
                &mut SplitMix64::new(seed),
            );
            let input: Vec<Fx32> = (0..5).map(|_| Fx32::from_real(rng.uniform(-2.0, 2.0))).collect();
            let qs: Vec<Quantizer> = (0..3).map(|_| Quantizer::fit(-1.5, 1.7, 16).unwrap()).collect();
            let (y_half, tape) = net.forward(&input, ForwardMode::Half16(&qs)).unwrap();
            // Replay layer by layer in full precision on dequantized inputs.
            let mut x = input.clone();
            for (layer, (q, rec)) in net.layers().iter().zip(qs.iter().zip(&tape.layers)) {
                let deq: Vec<Fx32> = x.iter().map(|&a| q.dequantize(q.quantize(a))).collect();
                assert_eq!(deq, rec.input);
                let one = Network::new(vec![layer.clone()]).unwrap();
                x = one.forward(&deq, ForwardMode::Full32).unwrap().0;
            }
            assert_eq!(x, y_half);
        }
    }

    #[test]
    fn soft_update_extremes() {
        let mut rng = SplitMix64::new(2);
        let src = Network::mlp(&[3, 6, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let orig = Network::mlp(&[3, 6, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let mut t = orig.clone();
        t.soft_update_from(&src, Fx32::ZERO);
        assert_eq!(t, orig);
        t.soft_update_from(&src, Fx32::ONE);
        assert_eq!(t, src);
    }

    #[test]
    fn halfcheetah_pair_param_bytes() {
        let mut rng = SplitMix64::new(0);
        let actor = Network::mlp(&[17, 400, 300, 6], Activation::Relu, Activation::Tanh, &mut rng);
        let critic = Network::mlp(&[23, 400, 300, 1], Activation::Relu, Activation::Identity, &mut rng);
        let bytes = actor.param_bytes() + critic.param_bytes();
        assert_eq!(bytes, 1_038_028);
        assert!((bytes as f64 / 1.05e6 - 1.0).abs() < 0.02);
    }
}

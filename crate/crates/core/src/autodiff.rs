//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A tape records ops in construction order (inputs always precede outputs,
//! so the graph is acyclic by construction) and `backward` replays it in
//! reverse, visiting each node exactly once. One tape per training step.
//!
//! Ops that apply an elementwise function to `y + u` (shared-dither noise)
//! can substitute the analytic width-1 average of the derivative,
//! `h(y + 1/2) - h(y - 1/2)`, for the sampled pathwise derivative in the
//! backward pass. The multiplier depends only on the pre-noise input, never
//! on the sampled offset.

use crate::density::{CdfScratch, DensityGrads, EvalDensity, FactorizedDensity};
use crate::softround::{
    reconstruct, reconstruct_derivative, soft_round, soft_round_derivative, soft_round_inverse,
};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("loss root must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },
}

/// Tape-leaf ids of the factorized density parameters, in the order of
/// [`FactorizedDensity::param_tensors`]. The rate op pushes its parameter
/// gradients into these accumulators.
#[derive(Clone)]
pub struct DensityLeaves {
    pub source: Arc<FactorizedDensity>,
    pub weight: Vec<NodeId>,
    pub bias: Vec<NodeId>,
    pub gate: Vec<NodeId>,
}

enum Op {
    Leaf { requires_grad: bool },
    /// out[n,m] = sum_k input[n,k] * weight[m,k]
    Linear { input: NodeId, weight: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Tanh { input: NodeId },
    Log { input: NodeId },
    Sum { input: NodeId },
    Scale { input: NodeId, factor: f64 },
    /// Round-to-nearest forward, identity backward.
    RoundSte { input: NodeId },
    /// Scalar mean squared error against a constant target.
    Mse { pred: NodeId, target: Tensor },
    /// y + u, identity backward.
    AddNoise { input: NodeId },
    SoftRound { input: NodeId, alpha: f64, expected: bool },
    /// r_alpha(y + u); expected backward multiplier is exactly 1.
    NoisyReconstruct { input: NodeId, noise: Arc<Vec<f64>>, alpha: f64, expected: bool },
    /// h(y + u) for a caller-supplied h; backward always uses the analytic
    /// width-1 finite difference of h.
    NoisyCustom { input: NodeId, h: fn(f64) -> f64 },
    /// Per-element coding cost -log2 p(y_i + u_i) under the soft-round
    /// density adapter; channel of element i is i mod C.
    RateBits {
        input: NodeId,
        noise: Arc<Vec<f64>>,
        density: Arc<EvalDensity>,
        alpha: f64,
        expected: bool,
        leaves: Option<DensityLeaves>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Tanh { .. } => "tanh",
            Op::Log { .. } => "log",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
            Op::RoundSte { .. } => "round_ste",
            Op::Mse { .. } => "mse",
            Op::AddNoise { .. } => "add_noise",
            Op::SoftRound { .. } => "soft_round",
            Op::NoisyReconstruct { .. } => "noisy_reconstruct",
            Op::NoisyCustom { .. } => "noisy_custom",
            Op::RateBits { .. } => "rate_bits",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN2: f64 = std::f64::consts::LN_2;

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, grad: None });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Tensor {
        let shape = self.nodes[id].value.shape().to_vec();
        match &self.nodes[id].grad {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { requires_grad: false }, value)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { requires_grad: true }, value)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId) -> NodeId {
        let (x, w) = (&self.nodes[input].value, &self.nodes[weight].value);
        assert_eq!(x.shape().len(), 2, "linear input must be 2-d");
        assert_eq!(w.shape().len(), 2, "linear weight must be 2-d");
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let (m, k2) = (w.shape()[0], w.shape()[1]);
        assert_eq!(k, k2, "linear: inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        let (xd, wd) = (x.data(), w.data());
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                let (xr, wr) = (i * k, j * k);
                for t in 0..k {
                    acc += xd[xr + t] * wd[wr + t];
                }
                out[i * m + j] = acc;
            }
        }
        self.push(Op::Linear { input, weight }, Tensor::new(vec![n, m], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Op::Add { a, b }, Tensor::new(shape, data))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Op::Mul { a, b }, Tensor::new(shape, data))
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let v = map_values(&self.nodes[input].value, |x| x.tanh());
        self.push(Op::Tanh { input }, v)
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        let v = map_values(&self.nodes[input].value, |x| x.ln());
        self.push(Op::Log { input }, v)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.nodes[input].value.data().iter().sum();
        self.push(Op::Sum { input }, Tensor::scalar(s))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let v = map_values(&self.nodes[input].value, |x| x * factor);
        self.push(Op::Scale { input, factor }, v)
    }

    pub fn round_ste(&mut self, input: NodeId) -> NodeId {
        let v = map_values(&self.nodes[input].value, |x| x.round());
        self.push(Op::RoundSte { input }, v)
    }

    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> NodeId {
        assert_eq!(self.nodes[pred].value.shape(), target.shape());
        let n = target.len() as f64;
        let s: f64 = self.nodes[pred]
            .value
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(Op::Mse { pred, target: target.clone() }, Tensor::scalar(s / n))
    }

    pub fn add_noise(&mut self, input: NodeId, noise: Arc<Vec<f64>>) -> NodeId {
        assert_eq!(self.nodes[input].value.len(), noise.len());
        let data = self.nodes[input]
            .value
            .data()
            .iter()
            .zip(noise.iter())
            .map(|(x, u)| x + u)
            .collect();
        let shape = self.nodes[input].value.shape().to_vec();
        self.push(Op::AddNoise { input }, Tensor::new(shape, data))
    }

    pub fn soft_round(&mut self, input: NodeId, alpha: f64, expected: bool) -> NodeId {
        let v = map_values(&self.nodes[input].value, |x| soft_round(x, alpha));
        self.push(Op::SoftRound { input, alpha, expected }, v)
    }

    pub fn noisy_reconstruct(
        &mut self,
        input: NodeId,
        noise: Arc<Vec<f64>>,
        alpha: f64,
        expected: bool,
    ) -> NodeId {
        assert_eq!(self.nodes[input].value.len(), noise.len());
        let data = self.nodes[input]
            .value
            .data()
            .iter()
            .zip(noise.iter())
            .map(|(x, u)| reconstruct(x + u, alpha))
            .collect();
        let shape = self.nodes[input].value.shape().to_vec();
        self.push(Op::NoisyReconstruct { input, noise, alpha, expected }, Tensor::new(shape, data))
    }

    /// Forward `h(y + u)`; backward substitutes the analytic expected
    /// derivative `h(y + 1/2) - h(y - 1/2)` per element.
    pub fn noisy_custom(
        &mut self,
        input: NodeId,
        noise: Arc<Vec<f64>>,
        h: fn(f64) -> f64,
    ) -> NodeId {
        assert_eq!(self.nodes[input].value.len(), noise.len());
        let data = self.nodes[input]
            .value
            .data()
            .iter()
            .zip(noise.iter())
            .map(|(x, u)| h(x + u))
            .collect();
        let shape = self.nodes[input].value.shape().to_vec();
        self.push(Op::NoisyCustom { input, h }, Tensor::new(shape, data))
    }

    /// Per-element coding cost of `y + u` under the density adapter. The
    /// element count must be a multiple of the density's channel count, with
    /// the channel as the fastest-varying index.
    pub fn rate_bits(
        &mut self,
        input: NodeId,
        noise: Arc<Vec<f64>>,
        density: Arc<EvalDensity>,
        alpha: f64,
        expected: bool,
        leaves: Option<DensityLeaves>,
    ) -> NodeId {
        let x = &self.nodes[input].value;
        assert_eq!(x.len(), noise.len());
        let channels = density.channels();
        assert_eq!(x.len() % channels, 0, "element count not a multiple of channel count");
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &y)| -density.log2_prob(i % channels, y + noise[i], alpha))
            .collect();
        let shape = x.shape().to_vec();
        self.push(
            Op::RateBits { input, noise, density, alpha, expected, leaves },
            Tensor::new(shape, data),
        )
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        let node = &mut self.nodes[id];
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Reverse pass from a scalar loss. Gradients of every `param` leaf are
    /// available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if self.nodes[loss].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.nodes[loss].value.shape().to_vec(),
            });
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(AutodiffError::NonFinite { node: id, op: node.op.name() });
            }
        }
        self.nodes[loss].grad = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let grad = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(id, &grad);
            self.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    fn backward_op(&mut self, id: NodeId, grad: &[f64]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Linear { input, weight } => {
                let (input, weight) = (*input, *weight);
                let x = self.nodes[input].value.clone();
                let w = self.nodes[weight].value.clone();
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[0];
                let mut dx = vec![0.0; n * k];
                let mut dw = vec![0.0; m * k];
                for i in 0..n {
                    for j in 0..m {
                        let g = grad[i * m + j];
                        if g == 0.0 {
                            continue;
                        }
                        let (xr, wr) = (i * k, j * k);
                        for t in 0..k {
                            dx[xr + t] += g * w.data()[wr + t];
                            dw[wr + t] += g * x.data()[xr + t];
                        }
                    }
                }
                self.accumulate(input, &dx);
                self.accumulate(weight, &dw);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> =
                    grad.iter().zip(self.nodes[b].value.data()).map(|(g, v)| g * v).collect();
                let db: Vec<f64> =
                    grad.iter().zip(self.nodes[a].value.data()).map(|(g, v)| g * v).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Tanh { input } => {
                let input = *input;
                let d: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .map(|(g, v)| g * (1.0 - v * v))
                    .collect();
                self.accumulate(input, &d);
            }
            Op::Log { input } => {
                let input = *input;
                let d: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[input].value.data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.accumulate(input, &d);
            }
            Op::Sum { input } => {
                let input = *input;
                let d = vec![grad[0]; self.nodes[input].value.len()];
                self.accumulate(input, &d);
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                let d: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                self.accumulate(input, &d);
            }
            Op::RoundSte { input } => {
                let input = *input;
                self.accumulate(input, grad);
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let n = target.len() as f64;
                let d: Vec<f64> = self.nodes[pred]
                    .value
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| grad[0] * 2.0 * (p - t) / n)
                    .collect();
                self.accumulate(pred, &d);
            }
            Op::AddNoise { input } => {
                let input = *input;
                self.accumulate(input, grad);
            }
            Op::SoftRound { input, alpha, expected } => {
                let (input, alpha, expected) = (*input, *alpha, *expected);
                let d: Vec<f64> = if expected {
                    grad.to_vec()
                } else {
                    grad.iter()
                        .zip(self.nodes[input].value.data())
                        .map(|(g, &y)| g * soft_round_derivative(y, alpha))
                        .collect()
                };
                self.accumulate(input, &d);
            }
            Op::NoisyReconstruct { input, noise, alpha, expected } => {
                let (input, alpha, expected) = (*input, *alpha, *expected);
                let d: Vec<f64> = if expected {
                    grad.to_vec()
                } else {
                    let noise = noise.clone();
                    grad.iter()
                        .zip(self.nodes[input].value.data())
                        .zip(noise.iter())
                        .map(|((g, &y), &u)| g * reconstruct_derivative(y + u, alpha))
                        .collect()
                };
                self.accumulate(input, &d);
            }
            Op::NoisyCustom { input, h } => {
                let (input, h) = (*input, *h);
                let d: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[input].value.data())
                    .map(|(g, &y)| g * (h(y + 0.5) - h(y - 0.5)))
                    .collect();
                self.accumulate(input, &d);
            }
            Op::RateBits { input, noise, density, alpha, expected, leaves } => {
                let input = *input;
                let alpha = *alpha;
                let expected = *expected;
                let noise = noise.clone();
                let density = density.clone();
                let leaves = leaves.clone();
                let channels = density.channels();
                let y = self.nodes[input].value.clone();

                let mut dy = vec![0.0; y.len()];
                for (i, &yi) in y.data().iter().enumerate() {
                    let ch = i % channels;
                    dy[i] = if expected {
                        // -(log2 p(y + 1/2) - log2 p(y - 1/2)), sharing the
                        // middle CDF evaluation between the two windows.
                        let w = soft_round_inverse(yi - 0.5, alpha);
                        let c0 = density.cdf(ch, w - 0.5);
                        let c1 = density.cdf(ch, w + 0.5);
                        let c2 = density.cdf(ch, w + 1.5);
                        let lo = log2_floored(c1 - c0);
                        let hi = log2_floored(c2 - c1);
                        grad[i] * -(hi - lo)
                    } else {
                        grad[i] * -density.dlog2_prob_dz(ch, yi + noise[i], alpha)
                    };
                }
                self.accumulate(input, &dy);

                if let Some(leaves) = leaves {
                    let mut grads = DensityGrads::zeros_like(&leaves.source);
                    let mut scratch_hi = CdfScratch::default();
                    let mut scratch_lo = CdfScratch::default();
                    let floor = (crate::density::LOG2_PROB_FLOOR * LN2).exp();
                    for (i, &yi) in y.data().iter().enumerate() {
                        let g = grad[i];
                        if g == 0.0 {
                            continue;
                        }
                        let ch = i % channels;
                        let w = soft_round_inverse(yi + noise[i], alpha);
                        let hi = density.cdf_saved(ch, w + 0.5, &mut scratch_hi);
                        let lo = density.cdf_saved(ch, w - 0.5, &mut scratch_lo);
                        let p = hi - lo;
                        if p <= floor {
                            continue; // clamped region: flat
                        }
                        let up = g / (p * LN2);
                        density.backward_params(ch, &scratch_hi, -up, &mut grads);
                        density.backward_params(ch, &scratch_lo, up, &mut grads);
                    }
                    for (k, t) in grads.weight_raw.iter().enumerate() {
                        self.accumulate(leaves.weight[k], t.data());
                    }
                    for (k, t) in grads.bias.iter().enumerate() {
                        self.accumulate(leaves.bias[k], t.data());
                    }
                    for (k, t) in grads.gate_raw.iter().enumerate() {
                        self.accumulate(leaves.gate[k], t.data());
                    }
                }
            }
        }
    }
}

fn log2_floored(p: f64) -> f64 {
    let l = p.log2();
    if l.is_finite() {
        l.max(crate::density::LOG2_PROB_FLOOR)
    } else {
        crate::density::LOG2_PROB_FLOOR
    }
}

fn map_values(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

/// Runs the reverse pass and returns the gradient of every gradient-bearing
/// leaf, keyed by node id.
pub fn forward_backward(
    tape: &mut Tape,
    loss: NodeId,
) -> Result<HashMap<NodeId, Tensor>, AutodiffError> {
    tape.backward(loss)?;
    let mut out = HashMap::new();
    for id in 0..tape.nodes.len() {
        if let Op::Leaf { requires_grad: true } = tape.nodes[id].op {
            out.insert(id, tape.grad_tensor(id));
        }
    }
    Ok(out)
}

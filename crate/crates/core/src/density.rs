//! Per-channel probability models.
//!
//! The trainable model is a non-parametric CDF: a stack of small monotone
//! layers with positive-reparameterized weights, squashed by a sigmoid. A
//! fixed logistic CDF serves as the analytic baseline for diagnostics and
//! oracle tests.
//!
//! Everything the codec needs is derived from the CDF `c`:
//! the density of the noisy value `z = s_a(y) + u` is
//! `c(sinv(z) + 1/2) - c(sinv(z) - 1/2)`, and the coding PMF conditioned on
//! the dither is the same expression at `z = k + u`. With `alpha = 0` the
//! soft-round adapter reduces to the plain additive-noise density.

use crate::channel::DitherStream;
use crate::softround::soft_round_inverse;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Log2 floor applied to symbol probabilities before discretization and to
/// log-density values; keeps the range coder's mass strictly positive.
pub const LOG2_PROB_FLOOR: f64 = -120.0;

/// Widest supported monotone layer (stack buffers in the hot path).
pub const MAX_WIDTH: usize = 16;

/// Hard cap on the per-channel symbol window handed to the entropy coder;
/// symbols outside the window travel through the escape path.
pub const MAX_SYMBOL_RANGE: i64 = 1024;

fn prob_floor() -> f64 {
    (LOG2_PROB_FLOOR * std::f64::consts::LN_2).exp()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1)
    y.exp_m1().ln()
}

/// Architecture of the non-parametric model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    /// Hidden layer widths; `[8, 8, 8]` gives four monotone layers.
    pub hidden: Vec<usize>,
    pub init_scale: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig { hidden: vec![8, 8, 8], init_scale: 10.0 }
    }
}

/// Trainable per-channel CDF model. Raw parameters; positivity and gate
/// constraints are applied at evaluation time (softplus / tanh).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedDensity {
    pub channels: usize,
    pub config: DensityConfig,
    /// Per affine layer: `[C, w_out, w_in]`.
    pub weight_raw: Vec<Tensor>,
    /// Per affine layer: `[C, w_out]`.
    pub bias: Vec<Tensor>,
    /// Per gated layer (all but the last): `[C, w_out]`.
    pub gate_raw: Vec<Tensor>,
}

impl FactorizedDensity {
    /// Layer input/output widths, e.g. hidden [8,8,8] -> [(1,8),(8,8),(8,8),(8,1)].
    pub fn layer_dims(config: &DensityConfig) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = 1usize;
        for &w in &config.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, 1));
        dims
    }

    pub fn new(channels: usize, config: DensityConfig, dither: &DitherStream) -> FactorizedDensity {
        for &w in &config.hidden {
            assert!(w <= MAX_WIDTH, "hidden width {w} exceeds {MAX_WIDTH}");
        }
        let dims = Self::layer_dims(&config);
        let depth = dims.len();
        let scale = config.init_scale.powf(1.0 / depth as f64);
        let mut weight_raw = Vec::new();
        let mut bias = Vec::new();
        let mut gate_raw = Vec::new();
        let mut draw = 0u64;
        for (k, &(w_in, w_out)) in dims.iter().enumerate() {
            let init = softplus_inv(1.0 / (scale * w_out as f64));
            weight_raw.push(Tensor::new(
                vec![channels, w_out, w_in],
                vec![init; channels * w_out * w_in],
            ));
            let b: Vec<f64> = (0..channels * w_out)
                .map(|_| {
                    let u = dither.uniform01(3, draw);
                    draw += 1;
                    u - 0.5
                })
                .collect();
            bias.push(Tensor::new(vec![channels, w_out], b));
            if k + 1 < depth {
                gate_raw.push(Tensor::zeros(vec![channels, w_out]));
            }
        }
        FactorizedDensity { channels, config, weight_raw, bias, gate_raw }
    }

    pub fn prepare(&self) -> EvalDensity {
        let dims = Self::layer_dims(&self.config);
        let mut layers = Vec::with_capacity(dims.len());
        for (k, &(w_in, w_out)) in dims.iter().enumerate() {
            let raw = self.weight_raw[k].data();
            let weight: Vec<f64> = raw.iter().map(|&x| softplus(x)).collect();
            let weight_sig: Vec<f64> = raw.iter().map(|&x| sigmoid(x)).collect();
            let (gate, gate_dchain) = if k + 1 < dims.len() {
                let g: Vec<f64> = self.gate_raw[k].data().iter().map(|&x| x.tanh()).collect();
                let d: Vec<f64> = g.iter().map(|&a| 1.0 - a * a).collect();
                (g, d)
            } else {
                (Vec::new(), Vec::new())
            };
            layers.push(PreparedLayer {
                w_in,
                w_out,
                weight,
                weight_sig,
                bias: self.bias[k].data().to_vec(),
                gate,
                gate_dchain,
            });
        }
        EvalDensity { channels: self.channels, kind: EvalKind::Factorized { layers } }
    }

    /// Flat views over the raw parameter tensors, in a fixed order
    /// (weights, biases, gates per layer). Used to register training leaves.
    pub fn param_tensors(&self) -> Vec<(&'static str, usize, &Tensor)> {
        let mut out = Vec::new();
        for (k, t) in self.weight_raw.iter().enumerate() {
            out.push(("weight", k, t));
        }
        for (k, t) in self.bias.iter().enumerate() {
            out.push(("bias", k, t));
        }
        for (k, t) in self.gate_raw.iter().enumerate() {
            out.push(("gate", k, t));
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weight_raw
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.gate_raw.iter_mut())
            .collect()
    }
}

struct PreparedLayer {
    w_in: usize,
    w_out: usize,
    /// softplus(weight_raw), `[C, w_out, w_in]` flat.
    weight: Vec<f64>,
    /// sigmoid(weight_raw): chain factor d softplus / d raw.
    weight_sig: Vec<f64>,
    bias: Vec<f64>,
    /// tanh(gate_raw); empty for the last layer.
    gate: Vec<f64>,
    /// 1 - gate^2: chain factor d tanh / d raw.
    gate_dchain: Vec<f64>,
}

enum EvalKind {
    Factorized { layers: Vec<PreparedLayer> },
    Logistic { location: f64, scale: f64 },
}

/// Read-side density: frozen, cheap to evaluate, shared by the loss and the
/// entropy coder.
pub struct EvalDensity {
    channels: usize,
    kind: EvalKind,
}

/// Saved forward activations of one CDF evaluation, for the parameter
/// backward pass. Reused across evaluations to avoid allocation.
#[derive(Default)]
pub struct CdfScratch {
    input: Vec<[f64; MAX_WIDTH]>,
    pre: Vec<[f64; MAX_WIDTH]>,
    logits: f64,
}

/// Gradients w.r.t. the raw parameters, same shapes and order as
/// [`FactorizedDensity::param_tensors`].
pub struct DensityGrads {
    pub weight_raw: Vec<Tensor>,
    pub bias: Vec<Tensor>,
    pub gate_raw: Vec<Tensor>,
}

impl DensityGrads {
    pub fn zeros_like(d: &FactorizedDensity) -> DensityGrads {
        DensityGrads {
            weight_raw: d.weight_raw.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            bias: d.bias.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            gate_raw: d.gate_raw.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

impl EvalDensity {
    pub fn logistic(channels: usize, location: f64, scale: f64) -> EvalDensity {
        assert!(scale > 0.0);
        EvalDensity { channels, kind: EvalKind::Logistic { location, scale } }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// CDF of the pre-noise coefficient for `channel`.
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        match &self.kind {
            EvalKind::Logistic { location, scale } => sigmoid((x - location) / scale),
            EvalKind::Factorized { layers } => {
                let (logits, _) = factorized_logits(layers, channel, x, false);
                sigmoid(logits)
            }
        }
    }

    /// CDF value and its derivative w.r.t. `x`.
    pub fn cdf_dx(&self, channel: usize, x: f64) -> (f64, f64) {
        match &self.kind {
            EvalKind::Logistic { location, scale } => {
                let c = sigmoid((x - location) / scale);
                (c, c * (1.0 - c) / scale)
            }
            EvalKind::Factorized { layers } => {
                let (logits, dlogits) = factorized_logits(layers, channel, x, true);
                let c = sigmoid(logits);
                (c, c * (1.0 - c) * dlogits)
            }
        }
    }

    /// Density of `s_a(Y) + U` at `z` (unfloored probability mass of the
    /// unit-width window around `sinv(z)`).
    pub fn prob_at(&self, channel: usize, z: f64, alpha: f64) -> f64 {
        let w = soft_round_inverse(z, alpha);
        self.cdf(channel, w + 0.5) - self.cdf(channel, w - 0.5)
    }

    /// log2 density of the noisy value, clamped at [`LOG2_PROB_FLOOR`].
    /// The flag reports whether the clamp fired.
    pub fn log2_prob_flagged(&self, channel: usize, z: f64, alpha: f64) -> (f64, bool) {
        let p = self.prob_at(channel, z, alpha);
        if p.log2() < LOG2_PROB_FLOOR || !p.is_finite() {
            (LOG2_PROB_FLOOR, true)
        } else {
            (p.log2(), false)
        }
    }

    pub fn log2_prob(&self, channel: usize, z: f64, alpha: f64) -> f64 {
        self.log2_prob_flagged(channel, z, alpha).0
    }

    /// Additive-noise density without soft rounding (`alpha = 0`).
    pub fn noisy_log2_density(&self, channel: usize, z: f64) -> f64 {
        self.log2_prob(channel, z, 0.0)
    }

    /// Coding PMF `P(K = k | U = u)`, floored so every symbol is codable.
    pub fn pmf_given_dither(&self, channel: usize, k: i64, u: f64, alpha: f64) -> f64 {
        self.prob_at(channel, k as f64 + u, alpha).max(prob_floor())
    }

    /// Derivative of log2 prob w.r.t. z (pathwise), used by the autodiff
    /// backward when expected gradients are disabled.
    pub fn dlog2_prob_dz(&self, channel: usize, z: f64, alpha: f64) -> f64 {
        let w = soft_round_inverse(z, alpha);
        let dw = crate::softround::reconstruct_derivative(z + 0.5, alpha);
        let (c_hi, d_hi) = self.cdf_dx(channel, w + 0.5);
        let (c_lo, d_lo) = self.cdf_dx(channel, w - 0.5);
        let p = c_hi - c_lo;
        if p <= prob_floor() {
            return 0.0;
        }
        (d_hi - d_lo) * dw / (p * std::f64::consts::LN_2)
    }

    /// PMF row for `k in [k_min, k_max]` at dither `u`, sharing CDF
    /// evaluations between adjacent symbols so the row telescopes exactly.
    pub fn pmf_row(
        &self,
        channel: usize,
        u: f64,
        alpha: f64,
        k_min: i64,
        k_max: i64,
        out: &mut Vec<f64>,
    ) {
        out.clear();
        let n = (k_max - k_min) as usize + 1;
        let w0 = soft_round_inverse(k_min as f64 + u, alpha);
        let floor = prob_floor();
        let mut prev = self.cdf(channel, w0 - 0.5);
        for j in 0..n {
            let next = self.cdf(channel, w0 + 0.5 + j as f64);
            out.push((next - prev).max(floor));
            prev = next;
        }
    }

    /// Symbol window covering all but ~1e-9 of the model mass, independent of
    /// the dither and of alpha (half-integers are fixed points of the
    /// soft-round maps).
    pub fn symbol_range(&self, channel: usize) -> (i64, i64) {
        let tail = 5e-10;
        let mut k_min = 0i64;
        while k_min > -MAX_SYMBOL_RANGE && self.cdf(channel, k_min as f64) > tail {
            k_min -= 1;
        }
        let mut k_max = 0i64;
        while k_max < MAX_SYMBOL_RANGE && self.cdf(channel, k_max as f64) < 1.0 - tail {
            k_max += 1;
        }
        (k_min, k_max)
    }

    /// CDF evaluation that records activations for [`Self::backward_params`].
    /// Only meaningful for the factorized variant; the logistic baseline has
    /// no trainable parameters and ignores the scratch.
    pub fn cdf_saved(&self, channel: usize, x: f64, scratch: &mut CdfScratch) -> f64 {
        match &self.kind {
            EvalKind::Logistic { location, scale } => sigmoid((x - location) / scale),
            EvalKind::Factorized { layers } => {
                scratch.input.resize(layers.len(), [0.0; MAX_WIDTH]);
                scratch.pre.resize(layers.len(), [0.0; MAX_WIDTH]);
                let mut t = [0.0; MAX_WIDTH];
                t[0] = x;
                let mut width = 1usize;
                for (k, layer) in layers.iter().enumerate() {
                    scratch.input[k][..width].copy_from_slice(&t[..width]);
                    let mut pre = [0.0; MAX_WIDTH];
                    let base = channel * layer.w_out * layer.w_in;
                    for o in 0..layer.w_out {
                        let mut acc = layer.bias[channel * layer.w_out + o];
                        let row = base + o * layer.w_in;
                        for i in 0..layer.w_in {
                            acc += layer.weight[row + i] * t[i];
                        }
                        pre[o] = acc;
                    }
                    scratch.pre[k][..layer.w_out].copy_from_slice(&pre[..layer.w_out]);
                    if !layer.gate.is_empty() {
                        for o in 0..layer.w_out {
                            let a = layer.gate[channel * layer.w_out + o];
                            t[o] = pre[o] + a * pre[o].tanh();
                        }
                    } else {
                        t[0] = pre[0];
                    }
                    width = layer.w_out;
                }
                scratch.logits = t[0];
                sigmoid(t[0])
            }
        }
    }

    /// Accumulates `upstream * d cdf / d raw_params` into `grads` for the
    /// evaluation recorded in `scratch`.
    pub fn backward_params(
        &self,
        channel: usize,
        scratch: &CdfScratch,
        upstream: f64,
        grads: &mut DensityGrads,
    ) {
        let layers = match &self.kind {
            EvalKind::Logistic { .. } => return,
            EvalKind::Factorized { layers } => layers,
        };
        let c = sigmoid(scratch.logits);
        let mut g = [0.0; MAX_WIDTH];
        g[0] = upstream * c * (1.0 - c);
        for (k, layer) in layers.iter().enumerate().rev() {
            let mut g_pre = [0.0; MAX_WIDTH];
            if !layer.gate.is_empty() {
                for o in 0..layer.w_out {
                    let idx = channel * layer.w_out + o;
                    let th = scratch.pre[k][o].tanh();
                    let a = layer.gate[idx];
                    g_pre[o] = g[o] * (1.0 + a * (1.0 - th * th));
                    grads.gate_raw[k].data_mut()[idx] += g[o] * th * layer.gate_dchain[idx];
                }
            } else {
                g_pre[0] = g[0];
            }
            let base = channel * layer.w_out * layer.w_in;
            let mut g_in = [0.0; MAX_WIDTH];
            for o in 0..layer.w_out {
                let row = base + o * layer.w_in;
                grads.bias[k].data_mut()[channel * layer.w_out + o] += g_pre[o];
                for i in 0..layer.w_in {
                    grads.weight_raw[k].data_mut()[row + i] +=
                        g_pre[o] * scratch.input[k][i] * layer.weight_sig[row + i];
                    g_in[i] += g_pre[o] * layer.weight[row + i];
                }
            }
            g = g_in;
        }
    }
}

fn factorized_logits(
    layers: &[PreparedLayer],
    channel: usize,
    x: f64,
    with_tangent: bool,
) -> (f64, f64) {
    let mut t = [0.0; MAX_WIDTH];
    let mut dt = [0.0; MAX_WIDTH];
    t[0] = x;
    dt[0] = 1.0;
    for layer in layers {
        let mut pre = [0.0; MAX_WIDTH];
        let mut dpre = [0.0; MAX_WIDTH];
        let base = channel * layer.w_out * layer.w_in;
        for o in 0..layer.w_out {
            let row = base + o * layer.w_in;
            let mut acc = layer.bias[channel * layer.w_out + o];
            let mut dacc = 0.0;
            for i in 0..layer.w_in {
                acc += layer.weight[row + i] * t[i];
                if with_tangent {
                    dacc += layer.weight[row + i] * dt[i];
                }
            }
            pre[o] = acc;
            dpre[o] = dacc;
        }
        if !layer.gate.is_empty() {
            for o in 0..layer.w_out {
                let a = layer.gate[channel * layer.w_out + o];
                let th = pre[o].tanh();
                t[o] = pre[o] + a * th;
                dt[o] = dpre[o] * (1.0 + a * (1.0 - th * th));
            }
        } else {
            t[0] = pre[0];
            dt[0] = dpre[0];
        }
    }
    (t[0], dt[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from a 30-digit arbitrary-precision script.
    const LOGISTIC_NOISY_P0: f64 = 0.244918662403709129;
    const LOGISTIC_NOISY_LOG2_P0: f64 = -2.029625385781438277;
    const LOGISTIC_SR4_LOG2_P03: f64 = -2.083133147238010031;

    fn logistic() -> EvalDensity {
        EvalDensity::logistic(1, 0.0, 1.0)
    }

    #[test]
    fn logistic_noisy_density_reference() {
        let d = logistic();
        let p = d.prob_at(0, 0.0, 0.0);
        assert!((p - LOGISTIC_NOISY_P0).abs() < 1e-14);
        assert!((d.noisy_log2_density(0, 0.0) - LOGISTIC_NOISY_LOG2_P0).abs() < 1e-12);
    }

    #[test]
    fn noisy_density_is_symmetric_for_symmetric_cdf() {
        let d = logistic();
        for z in [0.3, 1.7, 2.9] {
            let a = d.noisy_log2_density(0, z);
            let b = d.noisy_log2_density(0, -z);
            assert!((a - b).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn noisy_density_integrates_to_one() {
        // Simpson's rule over [-30, 30], h = 0.005.
        let d = logistic();
        let (lo, hi, n) = (-30.0f64, 30.0f64, 12_000usize);
        let h = (hi - lo) / n as f64;
        let f = |z: f64| d.prob_at(0, z, 0.0);
        let mut total = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * f(lo + h * i as f64);
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "integral={total}");
    }

    #[test]
    fn softround_adapter_reference_value() {
        let d = logistic();
        let got = d.log2_prob(0, 0.3, 4.0);
        assert!((got - LOGISTIC_SR4_LOG2_P03).abs() < 1e-12, "got={got}");
    }

    #[test]
    fn adapter_reduces_to_noisy_density_at_small_alpha() {
        let d = logistic();
        for z in [-1.3, 0.0, 0.4, 2.2] {
            let a = d.log2_prob(0, z, 1e-4);
            let b = d.noisy_log2_density(0, z);
            assert!((a - b).abs() < 1e-6, "z={z} a={a} b={b}");
        }
    }

    #[test]
    fn pmf_sums_to_one_across_dither_grid() {
        let d = logistic();
        for alpha in [0.0, 4.0] {
            for u in [-0.49, -0.25, 0.0, 0.25, 0.49] {
                let total: f64 =
                    (-50..=50).map(|k| d.pmf_given_dither(0, k, u, alpha)).sum();
                assert!(total > 1.0 - 1e-9, "alpha={alpha} u={u} total={total}");
                assert!(total < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn pmf_row_telescopes_exactly() {
        let d = logistic();
        let mut row = Vec::new();
        d.pmf_row(0, 0.37, 3.0, -60, 60, &mut row);
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "total={total}");
    }

    #[test]
    fn integer_shift_of_cdf_shifts_pmf() {
        let base = EvalDensity::logistic(1, 0.0, 1.0);
        let shifted = EvalDensity::logistic(1, 1.0, 1.0);
        for k in -5..=5 {
            for u in [-0.3, 0.0, 0.2] {
                let a = base.pmf_given_dither(0, k, u, 0.0);
                let b = shifted.pmf_given_dither(0, k + 1, u, 0.0);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn underflow_clamps_and_flags() {
        let d = logistic();
        let (v, clamped) = d.log2_prob_flagged(0, 500.0, 0.0);
        assert_eq!(v, LOG2_PROB_FLOOR);
        assert!(clamped);
        let (_, ok) = d.log2_prob_flagged(0, 0.0, 0.0);
        assert!(!ok);
    }

    #[test]
    fn factorized_cdf_is_monotone() {
        let dither = DitherStream::new(9);
        let f = FactorizedDensity::new(3, DensityConfig::default(), &dither);
        let d = f.prepare();
        for ch in 0..3 {
            let mut prev = -1.0;
            let mut x = -30.0;
            while x <= 30.0 {
                let c = d.cdf(ch, x);
                assert!(c > prev, "ch={ch} x={x}");
                assert!((0.0..=1.0).contains(&c));
                prev = c;
                x += 1e-2;
            }
        }
    }

    #[test]
    fn factorized_tails_approach_zero_and_one() {
        let dither = DitherStream::new(10);
        let f = FactorizedDensity::new(2, DensityConfig::default(), &dither);
        let d = f.prepare();
        assert!(d.cdf(0, -400.0) < 1e-6);
        assert!(d.cdf(0, 400.0) > 1.0 - 1e-6);
    }

    #[test]
    fn factorized_symbol_range_covers_mass() {
        let dither = DitherStream::new(11);
        let f = FactorizedDensity::new(1, DensityConfig::default(), &dither);
        let d = f.prepare();
        let (k_min, k_max) = d.symbol_range(0);
        assert!(k_min < 0 && k_max > 0);
        assert!(d.cdf(0, k_min as f64) <= 5e-10);
        assert!(d.cdf(0, k_max as f64) >= 1.0 - 5e-10);
    }

    #[test]
    fn cdf_dx_matches_finite_differences() {
        let dither = DitherStream::new(12);
        let f = FactorizedDensity::new(2, DensityConfig::default(), &dither);
        let d = f.prepare();
        for ch in 0..2 {
            for x in [-3.0, -0.5, 0.0, 1.1, 4.2] {
                let (_, dx) = d.cdf_dx(ch, x);
                let h = 1e-5;
                let fd = (d.cdf(ch, x + h) - d.cdf(ch, x - h)) / (2.0 * h);
                assert!((dx - fd).abs() < 1e-6 * fd.abs().max(1.0), "ch={ch} x={x}");
            }
        }
    }

    #[test]
    fn param_backward_matches_finite_differences() {
        let dither = DitherStream::new(13);
        let mut f = FactorizedDensity::new(2, DensityConfig::default(), &dither);
        let x = 0.7;
        let ch = 1;
        let mut scratch = CdfScratch::default();
        let mut grads = DensityGrads::zeros_like(&f);
        f.prepare().cdf_saved(ch, x, &mut scratch);
        f.prepare().backward_params(ch, &scratch, 1.0, &mut grads);

        let h = 1e-5;
        let check = |f: &mut FactorizedDensity, which: usize, k: usize, idx: usize| -> f64 {
            let bump = |f: &mut FactorizedDensity, delta: f64| {
                let t = match which {
                    0 => &mut f.weight_raw[k],
                    1 => &mut f.bias[k],
                    _ => &mut f.gate_raw[k],
                };
                t.data_mut()[idx] += delta;
            };
            bump(f, h);
            let hi = f.prepare().cdf(ch, x);
            bump(f, -2.0 * h);
            let lo = f.prepare().cdf(ch, x);
            bump(f, h);
            (hi - lo) / (2.0 * h)
        };

        for (which, per_layer) in
            [(0usize, f.weight_raw.len()), (1, f.bias.len()), (2, f.gate_raw.len())]
        {
            for k in 0..per_layer {
                let len = match which {
                    0 => f.weight_raw[k].len(),
                    1 => f.bias[k].len(),
                    _ => f.gate_raw[k].len(),
                };
                for idx in (0..len).step_by(3) {
                    let fd = check(&mut f, which, k, idx);
                    let ad = match which {
                        0 => grads.weight_raw[k].data()[idx],
                        1 => grads.bias[k].data()[idx],
                        _ => grads.gate_raw[k].data()[idx],
                    };
                    assert!(
                        (ad - fd).abs() < 1e-6 + 1e-4 * fd.abs(),
                        "which={which} k={k} idx={idx} ad={ad} fd={fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn evaluating_all_channels_keeps_shape() {
        let dither = DitherStream::new(14);
        let f = FactorizedDensity::new(4, DensityConfig::default(), &dither);
        let d = f.prepare();
        let zs = [0.1, -0.7, 1.3, 0.0, 2.2, -1.1, 0.5, 0.9];
        let out: Vec<f64> = zs
            .iter()
            .enumerate()
            .map(|(i, &z)| d.log2_prob(i % 4, z, 2.0))
            .collect();
        assert_eq!(out.len(), zs.len());
        assert!(out.iter().all(|v| v.is_finite()));
    }
}

//! Soft rounding: a smooth, strictly increasing approximation of
//! round-to-nearest, its closed-form inverse, and the reconstruction map used
//! on the decoder side.
//!
//! `soft_round(y, a)` is exact at integers and half-integers, converges to the
//! identity as `a -> 0` and to rounding as `a -> inf`. An `alpha` of exactly
//! `0.0` selects the identity everywhere (used by the plain noisy channel).

/// Above this sharpness the tanh ratio is evaluated through exponentials;
/// `tanh` saturates to 1.0 in f64 near 19 and the naive ratio loses the
/// sub-saturation structure needed by the inverse.
pub const ALPHA_STABLE_CROSSOVER: f64 = 30.0;

/// tanh(a*r) / tanh(a/2) for r in [-0.5, 0.5], stable for all a > 0.
fn tanh_ratio(alpha: f64, r: f64) -> f64 {
    if alpha <= ALPHA_STABLE_CROSSOVER {
        (alpha * r).tanh() / (alpha / 2.0).tanh()
    } else {
        // tanh(x) = sign(x) * (1 - e) / (1 + e) with e = exp(-2|x|).
        let en = (-2.0 * alpha * r.abs()).exp();
        let ed = (-alpha).exp();
        let num = (1.0 - en) / (1.0 + en);
        let den = (1.0 - ed) / (1.0 + ed);
        r.signum() * num / den
    }
}

/// Smoothly rounds `y` with sharpness `alpha`.
///
/// Value: `floor(y) + tanh(alpha*r)/(2 tanh(alpha/2)) + 1/2` with
/// `r = y - floor(y) - 1/2`. Strictly increasing, `s(y+1) = s(y)+1`,
/// `s(n) = n` and `s(n+1/2) = n+1/2` exactly.
pub fn soft_round(y: f64, alpha: f64) -> f64 {
    assert!(alpha >= 0.0, "alpha must be nonnegative, got {alpha}");
    if alpha == 0.0 {
        return y;
    }
    let base = y.floor();
    let r = y - base - 0.5;
    base + 0.5 * tanh_ratio(alpha, r) + 0.5
}

/// Inverse of [`soft_round`]; closed form via artanh on the fractional part.
///
/// Evaluated through the log form
/// `artanh(t*T)/alpha = ln(((1+t) + e^-a (1-t)) / ((1-t) + e^-a (1+t))) / (2a)`
/// with `t = 2 frac - 1` and `T = tanh(a/2)`, which stays accurate even when
/// `T` saturates to 1 in f64.
pub fn soft_round_inverse(z: f64, alpha: f64) -> f64 {
    assert!(alpha >= 0.0, "alpha must be nonnegative, got {alpha}");
    if alpha == 0.0 {
        return z;
    }
    let base = z.floor();
    let t = 2.0 * (z - base) - 1.0;
    if t >= 1.0 {
        // frac rounded up to 1.0; the true preimage is the next integer.
        return base + 1.0;
    }
    let e = (-alpha).exp();
    let num = (1.0 + t) + e * (1.0 - t);
    let den = (1.0 - t) + e * (1.0 + t);
    base + 0.5 + (num / den).ln() / (2.0 * alpha)
}

/// Decoder-side reconstruction `soft_round_inverse(z - 1/2) + 1/2`.
///
/// Midpoint of the interval of inputs consistent with an observed noisy
/// soft-rounded value; tends to round-to-nearest of the pre-noise input as
/// `alpha` grows.
pub fn reconstruct(z: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return z;
    }
    soft_round_inverse(z - 0.5, alpha) + 0.5
}

/// Derivative of [`soft_round`] w.r.t. `y`: `(a/2) sech^2(a*r) / tanh(a/2)`.
pub fn soft_round_derivative(y: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    let r = y - y.floor() - 0.5;
    let c = (alpha * r).cosh();
    if !c.is_finite() {
        return 0.0;
    }
    let sech2 = 1.0 / (c * c);
    0.5 * alpha * sech2 / (alpha / 2.0).tanh()
}

/// Derivative of [`reconstruct`] w.r.t. `z`: `1 / s'(s^-1(z - 1/2))`.
pub fn reconstruct_derivative(z: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    let y = soft_round_inverse(z - 0.5, alpha);
    let d = soft_round_derivative(y, alpha);
    if d <= 0.0 {
        0.0
    } else {
        1.0 / d
    }
}

/// Linear annealing schedule for the sharpness parameter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlphaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl AlphaSchedule {
    pub fn constant(alpha: f64) -> AlphaSchedule {
        AlphaSchedule { start: alpha, end: alpha, total_steps: 0 }
    }

    /// `alpha(t) = start + (end - start) * t / total_steps`, clamped at `end`.
    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.end;
        }
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.start + (self.end - self.start) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with a 30-digit arbitrary-precision script.
    const S1_AT_QUARTER: f64 = 0.235003712201594489;

    fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
        let step = (hi - lo) / n as f64;
        (0..=n).map(move |i| lo + step * i as f64)
    }

    #[test]
    fn integers_are_fixed_points() {
        for alpha in [0.5, 1.0, 7.0, 16.0, 80.0, 200.0] {
            for n in -3i64..=3 {
                assert_eq!(soft_round(n as f64, alpha), n as f64, "alpha={alpha} n={n}");
            }
        }
    }

    #[test]
    fn half_integers_are_fixed_points() {
        for alpha in [0.5, 1.0, 7.0, 16.0, 80.0] {
            for n in -3i64..=3 {
                let y = n as f64 + 0.5;
                assert!((soft_round(y, alpha) - y).abs() < 1e-15, "alpha={alpha} y={y}");
            }
        }
    }

    #[test]
    fn matches_high_precision_reference() {
        assert!((soft_round(0.25, 1.0) - S1_AT_QUARTER).abs() < 1e-15);
        assert!((soft_round_inverse(S1_AT_QUARTER, 1.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0
        };
        for alpha in [0.5, 1.0, 7.0, 16.0] {
            for _ in 0..1000 {
                let y = next();
                let z = soft_round(y, alpha);
                assert!(
                    (soft_round_inverse(z, alpha) - y).abs() < 1e-9,
                    "alpha={alpha} y={y}"
                );
            }
        }
    }

    #[test]
    fn inverse_fixes_integers() {
        for alpha in [0.5, 4.0, 16.0, 100.0] {
            for n in -5i64..=5 {
                assert!((soft_round_inverse(n as f64, alpha) - n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strictly_increasing_on_dense_grid() {
        for alpha in [0.1, 1.0, 7.0, 16.0, 20.0] {
            let mut prev = f64::NEG_INFINITY;
            for y in grid(-2.0, 2.0, 4000) {
                let v = soft_round(y, alpha);
                assert!(v > prev, "alpha={alpha} y={y}");
                prev = v;
            }
        }
    }

    #[test]
    fn small_alpha_tends_to_identity() {
        let max_err = grid(-2.0, 2.0, 2000)
            .map(|y| (soft_round(y, 1e-3) - y).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-3, "max err {max_err}");
    }

    #[test]
    fn large_alpha_tends_to_rounding() {
        // Grid points at distance >= 0.1 from half-integers.
        let mut max_err = 0.0f64;
        for n in -2i64..=2 {
            for k in 0..=8 {
                let y = n as f64 - 0.4 + 0.1 * k as f64;
                max_err = max_err.max((soft_round(y, 100.0) - y.round()).abs());
            }
        }
        assert!(max_err < 1e-4, "max err {max_err}");
    }

    #[test]
    fn derivative_at_integers_matches_closed_form() {
        // Central differences at y = n converge to (a/2) tanh'(-a/2) / tanh(a/2).
        for alpha in [1.0f64, 4.0, 13.0] {
            let closed = {
                let c = (alpha / 2.0).cosh();
                0.5 * alpha / (c * c) / (alpha / 2.0).tanh()
            };
            for n in [-2.0, 0.0, 3.0] {
                let h = 1e-6;
                let fd = (soft_round(n + h, alpha) - soft_round(n - h, alpha)) / (2.0 * h);
                assert!((fd - closed).abs() < 1e-5, "alpha={alpha} fd={fd} closed={closed}");
                assert!((soft_round_derivative(n, alpha) - closed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruct_shift_periodicity() {
        for alpha in [0.5, 4.0, 16.0] {
            for z in grid(-1.8, 1.8, 50) {
                let a = reconstruct(z + 1.0, alpha);
                let b = reconstruct(z, alpha) + 1.0;
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn composition_error_decays_as_one_over_alpha() {
        // |r(s(y)+u) - round(y)| approaches artanh(2u)/alpha once s saturates.
        let y = 0.4;
        let u = 0.3;
        let expected = |alpha: f64| 0.6f64.atanh() / alpha;
        for alpha in [100.0, 1000.0, 1e5, 1e7] {
            let got = reconstruct(soft_round(y, alpha) + u, alpha) - y.round();
            assert!(
                (got - expected(alpha)).abs() < 1e-3 * expected(alpha) + 1e-12,
                "alpha={alpha} got={got} expected={}",
                expected(alpha)
            );
        }
        // At alpha = 1e7 the composition is within 1e-6 of round(y).
        let far = reconstruct(soft_round(y, 1e7) + u, 1e7) - y.round();
        assert!(far.abs() < 1e-6);
    }

    #[test]
    fn double_soft_round_approaches_hard_rounding() {
        // s(s(y)+u) -> round(y) when s(y)+u stays clear of half-integers.
        for (y, u) in [(0.4, 0.3), (-1.3, -0.2), (2.2, 0.1)] {
            let z = soft_round(soft_round(y, 100.0) + u, 100.0);
            assert!((z - y.round()).abs() < 1e-6, "y={y} u={u} z={z}");
        }
    }

    #[test]
    fn pathwise_derivative_spikes_at_half_integers() {
        // At alpha=16 the pathwise slope at a half-integer exceeds 4 even
        // though the width-1 average of the slope is exactly 1.
        assert!(soft_round_derivative(0.5, 16.0) > 4.0);
        let avg = soft_round(0.5 + 0.5, 16.0) - soft_round(0.5 - 0.5, 16.0);
        assert!((avg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stable_ratio_agrees_across_crossover() {
        for r in grid(-0.5, 0.5, 40) {
            let lo = tanh_ratio(ALPHA_STABLE_CROSSOVER - 1e-9, r);
            let hi = tanh_ratio(ALPHA_STABLE_CROSSOVER + 1e-9, r);
            assert!((lo - hi).abs() < 1e-9, "r={r} lo={lo} hi={hi}");
        }
    }

    #[test]
    fn schedule_is_linear() {
        let s = AlphaSchedule { start: 1.0, end: 16.0, total_steps: 20000 };
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(20000), 16.0);
        assert!((s.at(10000) - 8.5).abs() < 1e-12);
        assert_eq!(s.at(30000), 16.0);
    }
}

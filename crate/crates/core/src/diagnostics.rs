//! Statistical experiments behind `uqc diag` and the verification suite:
//! channel identity checks, dither independence, the Gaussian scale-mixture
//! channel, hexagonal lattice dither, and the gradient-variance comparison.

use crate::channel::{
    gaussian_channel, lattice_universal_quantize, round_half_away, DitherStream, LatticeKind,
    LatticeSpec, ScaleMixtureSpec,
};
use crate::density::EvalDensity;
use crate::softround::{soft_round, soft_round_derivative, soft_round_inverse};
use crate::stats;

fn substream(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
pub struct KsRow {
    pub y: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample KS between the dithered-quantizer output `round(y-U)+U` and
/// direct noise `y+U'`, per probe value.
pub fn uq_identity_ks(ys: &[f64], n: usize, seed: u64) -> Vec<KsRow> {
    ys.iter()
        .enumerate()
        .map(|(case, &y)| {
            let via = DitherStream::new(substream(seed, 2 * case as u64));
            let direct = DitherStream::new(substream(seed, 2 * case as u64 + 1));
            let mut a: Vec<f64> = (0..n as u64)
                .map(|i| {
                    let u = via.offset(i);
                    round_half_away(y - u) + u
                })
                .collect();
            let mut b: Vec<f64> = (0..n as u64).map(|i| y + direct.offset(i)).collect();
            let d = stats::ks2_statistic(&mut a, &mut b);
            KsRow { y, statistic: d, p_value: stats::ks2_pvalue(d, n, n) }
        })
        .collect()
}

/// Sample correlation between offsets at index pairs `(i, i+lag)`.
pub fn dither_independence(lags: &[u64], n: usize, seed: u64) -> Vec<(u64, f64)> {
    let d = DitherStream::new(seed);
    lags.iter()
        .map(|&lag| {
            let stride = lag.max(1) + 1;
            let a: Vec<f64> = (0..n as u64).map(|i| d.offset(i * stride)).collect();
            let b: Vec<f64> = (0..n as u64).map(|i| d.offset(i * stride + lag)).collect();
            (lag, stats::pearson_corr(&a, &b))
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianChannelReport {
    pub mean: f64,
    pub variance: f64,
    pub excess_kurtosis: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

/// Moments and a one-sample KS of the reconstruction error of the Gaussian
/// scale-mixture channel against `Normal(0, sigma^2)`.
pub fn gaussian_channel_report(
    sigma: f64,
    n_moments: usize,
    n_ks: usize,
    seed: u64,
) -> GaussianChannelReport {
    let spec = ScaleMixtureSpec::new(sigma);
    let d = DitherStream::new(seed);
    let y = 0.625; // arbitrary transmitted value; the error law is invariant
    let errs: Vec<f64> = (0..n_moments as u64)
        .map(|i| {
            let (_, recon) = gaussian_channel(y, &spec, &d, i);
            recon - y
        })
        .collect();
    let m = stats::sample_moments(&errs);
    let mut subset: Vec<f64> = errs.iter().copied().take(n_ks).collect();
    let ks = stats::ks1_statistic(&mut subset, |x| stats::normal_cdf(x, 0.0, sigma));
    GaussianChannelReport {
        mean: m.mean,
        variance: m.variance,
        excess_kurtosis: m.excess_kurtosis,
        ks_statistic: ks,
        ks_p_value: stats::ks1_pvalue(ks, subset.len()),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnergyRow {
    pub case: &'static str,
    pub statistic: f64,
    pub p_value: f64,
}

/// Hexagonal-lattice dither equivalence: the reconstruction of the lattice
/// quantizer matches direct sampling of `y + U(cell)` in distribution.
/// `n` samples are drawn per side; the permutation test runs on an
/// evenly-spaced subset (the energy statistic is quadratic in its input).
pub fn hexagonal_equivalence(n: usize, subset: usize, permutations: usize, seed: u64) -> Vec<EnergyRow> {
    let lat = LatticeSpec::new(LatticeKind::HexagonalA2);
    let cases: [(&'static str, [f64; 2]); 2] =
        [("origin", [0.0, 0.0]), ("generic", [0.3, -0.7])];
    cases
        .iter()
        .enumerate()
        .map(|(ci, &(name, y))| {
            let via = DitherStream::new(substream(seed, 10 + ci as u64));
            let direct = DitherStream::new(substream(seed, 20 + ci as u64));
            let a: Vec<[f64; 2]> = (0..n as u64)
                .map(|i| {
                    let (_, recon) = lattice_universal_quantize(y, &lat, &via, i);
                    recon
                })
                .collect();
            let b: Vec<[f64; 2]> = (0..n as u64)
                .map(|i| {
                    let u = lat.sample_cell(&direct, i);
                    [y[0] + u[0], y[1] + u[1]]
                })
                .collect();
            let stride = (n / subset).max(1);
            let a_sub: Vec<[f64; 2]> = a.iter().step_by(stride).take(subset).copied().collect();
            let b_sub: Vec<[f64; 2]> = b.iter().step_by(stride).take(subset).copied().collect();
            let (stat, p) =
                stats::energy_distance_test(&a_sub, &b_sub, permutations, substream(seed, 99));
            EnergyRow { case: name, statistic: stat, p_value: p }
        })
        .collect()
}

/// Variance of the per-coefficient rate gradient under the pathwise and the
/// expected-derivative backward rules, with the coefficient drawn from the
/// logistic source the density models. Returns `(var_pathwise, var_expected)`.
pub fn rate_gradient_variance(alpha: f64, n: usize, seed: u64) -> (f64, f64) {
    let density = EvalDensity::logistic(1, 0.0, 1.0);
    let d = DitherStream::new(seed);
    let mut pathwise = Vec::with_capacity(n);
    let mut expected = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let q = d.uniform01(4, i).clamp(1e-12, 1.0 - 1e-12);
        let y = (q / (1.0 - q)).ln(); // logistic draw
        let u = d.offset(i);
        let ys = soft_round(y, alpha);
        // d/dy of -log2 p(s(y)+u): sampled slope times the quantizer slope.
        let pw = -density.dlog2_prob_dz(0, ys + u, alpha) * soft_round_derivative(y, alpha);
        pathwise.push(pw);
        // Analytic width-1 average with the straight-through quantizer rule.
        let w = soft_round_inverse(ys - 0.5, alpha);
        let c0 = density.cdf(0, w - 0.5);
        let c1 = density.cdf(0, w + 0.5);
        let c2 = density.cdf(0, w + 1.5);
        let lo = (c1 - c0).max(f64::MIN_POSITIVE).log2();
        let hi = (c2 - c1).max(f64::MIN_POSITIVE).log2();
        expected.push(-(hi - lo));
    }
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    };
    (var(&pathwise), var(&expected))
}

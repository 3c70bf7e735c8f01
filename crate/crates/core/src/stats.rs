//! Statistical checks backing the channel diagnostics: Kolmogorov-Smirnov
//! tests, chi-square goodness of fit, sample moments, pairwise correlation,
//! and a permutation-based two-sample energy-distance test.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Two-sample Kolmogorov-Smirnov statistic. Sorts its inputs in place.
pub fn ks2_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        let diff = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        if diff > d {
            d = diff;
        }
    }
    d
}

/// One-sample KS statistic against a CDF evaluated by `cdf`.
pub fn ks1_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - c).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution,
/// `Q(t) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 t^2)`.
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * t * t).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic two-sample KS p-value with Stephens' small-sample correction.
pub fn ks2_pvalue(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let sqrt_ne = ne.sqrt();
    kolmogorov_sf((sqrt_ne + 0.12 + 0.11 / sqrt_ne) * d)
}

/// Asymptotic one-sample KS p-value.
pub fn ks1_pvalue(d: f64, n: usize) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    kolmogorov_sf((sqrt_n + 0.12 + 0.11 / sqrt_n) * d)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).unwrap().cdf(x)
}

#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn sample_moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    Moments {
        mean,
        variance: m2,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    }
}

pub fn pearson_corr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va.sqrt() * vb.sqrt())
}

/// Pearson chi-square goodness of fit. Bins with expected count below
/// `min_expected` are pooled into their left neighbor. Returns `(stat, p)`.
pub fn chi2_gof(observed: &[f64], expected: &[f64], min_expected: f64) -> (f64, f64) {
    assert_eq!(observed.len(), expected.len());
    let mut obs_pooled = Vec::new();
    let mut exp_pooled = Vec::new();
    let mut acc_o = 0.0;
    let mut acc_e = 0.0;
    for (&o, &e) in observed.iter().zip(expected) {
        acc_o += o;
        acc_e += e;
        if acc_e >= min_expected {
            obs_pooled.push(acc_o);
            exp_pooled.push(acc_e);
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 {
        if let (Some(o), Some(e)) = (obs_pooled.last_mut(), exp_pooled.last_mut()) {
            *o += acc_o;
            *e += acc_e;
        }
    }
    let stat: f64 = obs_pooled
        .iter()
        .zip(&exp_pooled)
        .map(|(&o, &e)| (o - e) * (o - e) / e)
        .sum();
    let dof = (obs_pooled.len() as f64 - 1.0).max(1.0);
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    (stat, p)
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Two-sample energy statistic for 2-D samples.
pub fn energy_statistic(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut d_ab = 0.0;
    for x in a {
        for y in b {
            d_ab += euclid(*x, *y);
        }
    }
    let mut d_aa = 0.0;
    for i in 0..a.len() {
        for j in (i + 1)..a.len() {
            d_aa += euclid(a[i], a[j]);
        }
    }
    let mut d_bb = 0.0;
    for i in 0..b.len() {
        for j in (i + 1)..b.len() {
            d_bb += euclid(b[i], b[j]);
        }
    }
    2.0 * d_ab / (n * m) - 2.0 * d_aa / (n * n) - 2.0 * d_bb / (m * m)
}

/// Permutation test on the energy statistic; returns `(statistic, p_value)`.
/// The shuffles are driven by a SplitMix64 stream so results are seeded.
pub fn energy_distance_test(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    permutations: usize,
    seed: u64,
) -> (f64, f64) {
    let observed = energy_statistic(a, b);
    let mut pool: Vec<[f64; 2]> = a.iter().chain(b.iter()).copied().collect();
    let n = a.len();
    let mut state = seed;
    let mut next = move || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut at_least = 1usize;
    for _ in 0..permutations {
        // Fisher-Yates shuffle.
        for i in (1..pool.len()).rev() {
            let j = (next() % (i as u64 + 1)) as usize;
            pool.swap(i, j);
        }
        let stat = energy_statistic(&pool[..n], &pool[n..]);
        if stat >= observed {
            at_least += 1;
        }
    }
    (observed, at_least as f64 / (permutations as f64 + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed;
        move || {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn ks2_same_distribution_has_high_pvalue() {
        let mut r1 = stream(1);
        let mut r2 = stream(2);
        let mut a: Vec<f64> = (0..5000).map(|_| r1()).collect();
        let mut b: Vec<f64> = (0..5000).map(|_| r2()).collect();
        let d = ks2_statistic(&mut a, &mut b);
        assert!(ks2_pvalue(d, 5000, 5000) > 0.01);
    }

    #[test]
    fn ks2_detects_shift() {
        let mut r1 = stream(3);
        let mut r2 = stream(4);
        let mut a: Vec<f64> = (0..5000).map(|_| r1()).collect();
        let mut b: Vec<f64> = (0..5000).map(|_| r2() + 0.2).collect();
        let d = ks2_statistic(&mut a, &mut b);
        assert!(ks2_pvalue(d, 5000, 5000) < 1e-6);
    }

    #[test]
    fn ks1_uniform_cdf() {
        let mut r = stream(9);
        let mut a: Vec<f64> = (0..20_000).map(|_| r()).collect();
        let d = ks1_statistic(&mut a, |x| x.clamp(0.0, 1.0));
        assert!(ks1_pvalue(d, 20_000) > 0.01, "d={d}");
    }

    #[test]
    fn kolmogorov_sf_known_point() {
        // Q(0.828) is approximately 0.5 (median of the distribution).
        let q = kolmogorov_sf(0.8275);
        assert!((q - 0.5).abs() < 0.01, "q={q}");
    }

    #[test]
    fn chi2_uniform_counts_fit() {
        let observed = vec![98.0, 105.0, 97.0, 99.0, 101.0];
        let expected = vec![100.0; 5];
        let (_, p) = chi2_gof(&observed, &expected, 5.0);
        assert!(p > 0.5, "p={p}");
    }

    #[test]
    fn energy_test_accepts_identical_sources() {
        let mut r = stream(11);
        let a: Vec<[f64; 2]> = (0..300).map(|_| [r(), r()]).collect();
        let b: Vec<[f64; 2]> = (0..300).map(|_| [r(), r()]).collect();
        let (_, p) = energy_distance_test(&a, &b, 199, 5);
        assert!(p > 0.01, "p={p}");
    }

    #[test]
    fn energy_test_rejects_shifted_source() {
        let mut r = stream(12);
        let a: Vec<[f64; 2]> = (0..300).map(|_| [r(), r()]).collect();
        let b: Vec<[f64; 2]> = (0..300).map(|_| [r() + 0.5, r()]).collect();
        let (_, p) = energy_distance_test(&a, &b, 199, 6);
        assert!(p <= 0.01, "p={p}");
    }

    #[test]
    fn moments_of_uniform() {
        let mut r = stream(21);
        let x: Vec<f64> = (0..200_000).map(|_| r()).collect();
        let m = sample_moments(&x);
        assert!((m.mean - 0.5).abs() < 0.005);
        assert!((m.variance - 1.0 / 12.0).abs() < 0.001);
        assert!((m.excess_kurtosis + 1.2).abs() < 0.05);
    }
}

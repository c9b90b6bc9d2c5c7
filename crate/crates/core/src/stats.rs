//! Monte Carlo aggregation, z-tests and two-sample Kolmogorov-Smirnov tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{usage, Result};

/// Two-sided z threshold used throughout the suite.
pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<CompensatedSum>().value()
}

/// Mean and standard error of a finished set of replications.
///
/// Identical inputs give exactly that value with zero standard error, so
/// constant observables do not pick up rounding noise.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return (first, 0.0);
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(values.iter().map(|&v| (v - mean) * (v - mean)));
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo estimate of a (quenched) average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub se: f64,
    pub inner: usize,
    pub outer: usize,
    pub seed: u64,
    /// Stream address the estimate was drawn from.
    pub stream: String,
}

impl MCEstimate {
    pub fn from_values(values: &[f64], inner: usize, seed: u64, stream: impl Into<String>) -> Self {
        let (mean, se) = mean_and_se(values);
        Self {
            mean,
            se,
            inner: inner.max(1),
            outer: values.len().max(1),
            seed,
            stream: stream.into(),
        }
    }

    /// Exact value with zero uncertainty.
    pub fn exact(value: f64, seed: u64, stream: impl Into<String>) -> Self {
        Self {
            mean: value,
            se: 0.0,
            inner: 1,
            outer: 1,
            seed,
            stream: stream.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestVerdict {
    /// |z| for z-tests, the sup-distance for KS tests.
    pub statistic: f64,
    pub threshold: f64,
    pub level: f64,
    pub pass: bool,
    /// Set when the statistic is infinite (zero uncertainty, unequal values).
    pub infinite: bool,
    pub sizes: [usize; 2],
}

impl TestVerdict {
    fn new(statistic: f64, threshold: f64, level: f64, sizes: [usize; 2]) -> Self {
        Self {
            statistic,
            threshold,
            level,
            pass: statistic <= threshold,
            infinite: statistic.is_infinite(),
            sizes,
        }
    }
}

/// Two-sided z threshold for a significance level.
pub fn z_threshold_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return usage(format!("significance level must lie in (0, 1), got {level}"));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - level / 2.0))
}

/// Two-sided significance level of a z threshold.
pub fn level_for_z_threshold(threshold: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    /// Signed z-score (`a - b` over the combined standard error).
    pub z: f64,
    pub verdict: TestVerdict,
}

/// Signed z-score of a difference; 0 when both are exactly zero.
pub fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

/// Equality test between two independent estimates, at a significance level.
pub fn z_equality_test(a: &MCEstimate, b: &MCEstimate, level: f64) -> Result<ZTest> {
    let threshold = z_threshold_for_level(level)?;
    Ok(z_equality_test_at(a, b, threshold))
}

/// Equality test between two independent estimates with an explicit |z| threshold.
/// A statistic exactly on the threshold passes.
pub fn z_equality_test_at(a: &MCEstimate, b: &MCEstimate, threshold: f64) -> ZTest {
    let se = (a.se * a.se + b.se * b.se).sqrt();
    let z = z_score(a.mean - b.mean, se);
    ZTest {
        z,
        verdict: TestVerdict::new(
            z.abs(),
            threshold,
            level_for_z_threshold(threshold),
            [a.outer, b.outer],
        ),
    }
}

/// z-test of a paired difference estimate against zero.
pub fn z_zero_test_at(diff: &MCEstimate, threshold: f64) -> ZTest {
    let z = z_score(diff.mean, diff.se);
    ZTest {
        z,
        verdict: TestVerdict::new(
            z.abs(),
            threshold,
            level_for_z_threshold(threshold),
            [diff.outer, diff.outer],
        ),
    }
}

pub const KS_MIN_SAMPLE: usize = 50;

/// Sup-distance between the empirical CDFs of two samples. Ties are
/// resolved by stepping both ECDFs past a shared value before comparing.
pub fn ks_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic critical value of the two-sample KS statistic.
pub fn ks_critical_value(n: usize, m: usize, level: f64) -> f64 {
    let c = (-(level / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Asymptotic p-value of the two-sample KS statistic (Kolmogorov tail series).
pub fn ks_p_value(statistic: f64, n: usize, m: usize) -> f64 {
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * statistic;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = sign * 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    sum.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub p_value: f64,
    pub verdict: TestVerdict,
}

pub fn ks_two_sample(xs: &[f64], ys: &[f64], level: f64) -> Result<KsTest> {
    if xs.len() < KS_MIN_SAMPLE || ys.len() < KS_MIN_SAMPLE {
        return usage(format!(
            "KS test needs at least {KS_MIN_SAMPLE} points per sample, got {} and {}",
            xs.len(),
            ys.len()
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return usage(format!("significance level must lie in (0, 1), got {level}"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return usage("KS test input contains NaN");
    }
    let d = ks_statistic(xs, ys);
    let threshold = ks_critical_value(xs.len(), ys.len(), level);
    Ok(KsTest {
        p_value: ks_p_value(d, xs.len(), ys.len()),
        verdict: TestVerdict::new(d, threshold, level, [xs.len(), ys.len()]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::RandomStream;

    fn est(mean: f64, se: f64) -> MCEstimate {
        MCEstimate {
            mean,
            se,
            inner: 1,
            outer: 100,
            seed: 0,
            stream: "0".into(),
        }
    }

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn constant_replications_have_zero_se() {
        let (m, se) = mean_and_se(&[0.1; 1000]);
        assert_eq!(m, 0.1);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn mean_and_se_match_textbook_values() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_estimates_pass() {
        let a = est(0.4, 0.01);
        let t = z_equality_test(&a, &a, 0.01).unwrap();
        assert_eq!(t.z, 0.0);
        assert!(t.verdict.pass);
    }

    #[test]
    fn negative_control_means_reject() {
        let t = z_equality_test_at(&est(0.68, 0.001), &est(0.8933, 0.001), 3.0);
        // -0.2133 / sqrt(2e-6)
        assert!((t.z - (-150.826)).abs() < 0.1, "z = {}", t.z);
        assert!(!t.verdict.pass);
    }

    #[test]
    fn boundary_is_a_pass() {
        // combined SE sqrt(9 + 16) = 5, difference 15 -> z = 3 exactly
        let t = z_equality_test_at(&est(15.0, 3.0), &est(0.0, 4.0), 3.0);
        assert_eq!(t.z, 3.0);
        assert!(t.verdict.pass);
    }

    #[test]
    fn zero_se_unequal_means_is_infinite_reject() {
        let t = z_equality_test_at(&est(0.52, 0.0), &est(0.5712, 0.0), 3.0);
        assert!(t.verdict.infinite);
        assert!(!t.verdict.pass);
        assert!(t.z.is_infinite() && t.z < 0.0);
    }

    #[test]
    fn z_test_is_symmetric() {
        let a = est(0.3, 0.02);
        let b = est(0.36, 0.01);
        let ab = z_equality_test_at(&a, &b, 3.0);
        let ba = z_equality_test_at(&b, &a, 3.0);
        assert_eq!(ab.z, -ba.z);
        assert_eq!(ab.verdict.pass, ba.verdict.pass);
    }

    #[test]
    fn level_and_threshold_round_trip() {
        let th = z_threshold_for_level(0.01).unwrap();
        assert!((th - 2.5758).abs() < 1e-3);
        assert!((level_for_z_threshold(th) - 0.01).abs() < 1e-10);
        assert!(z_threshold_for_level(1.5).is_err());
    }

    #[test]
    fn ks_identical_samples() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 7.0).collect();
        let t = ks_two_sample(&xs, &xs, 0.01).unwrap();
        assert_eq!(t.verdict.statistic, 0.0);
        assert!(t.verdict.pass);
    }

    #[test]
    fn ks_point_mass_against_mixture() {
        let xs = vec![0.8; 60];
        let ys: Vec<f64> = (0..60).map(|i| if i % 3 == 0 { 0.8 } else { 1.0 }).collect();
        let t = ks_two_sample(&xs, &ys, 0.01).unwrap();
        assert!((t.verdict.statistic - 2.0 / 3.0).abs() < 1e-12);
        assert!(!t.verdict.pass);
        let swapped = ks_two_sample(&ys, &xs, 0.01).unwrap();
        assert_eq!(swapped.verdict.statistic, t.verdict.statistic);
    }

    #[test]
    fn ks_rejects_undersized_samples() {
        assert!(ks_two_sample(&[0.0; 49], &[0.0; 60], 0.01).is_err());
    }

    #[test]
    fn ks_calibration_on_uniform_samples() {
        let root = RandomStream::root(5150);
        let runs = 500;
        let mut passes = 0;
        for r in 0..runs {
            let mut rng = root.derive(r).rng();
            let xs: Vec<f64> = (0..200).map(|_| rng.random()).collect();
            let ys: Vec<f64> = (0..300).map(|_| rng.random()).collect();
            if ks_two_sample(&xs, &ys, 0.01).unwrap().verdict.pass {
                passes += 1;
            }
        }
        assert!(passes as f64 >= 0.98 * runs as f64, "passes = {passes}");
    }

    #[test]
    fn ks_p_value_is_consistent_with_threshold() {
        let (n, m) = (1000, 1000);
        let crit = ks_critical_value(n, m, 0.05);
        let p = ks_p_value(crit, n, m);
        assert!((p - 0.05).abs() < 0.01, "p = {p}");
    }
}

//! Monte Carlo estimates and the small statistical toolbox used by the
//! verification harness (KS and chi-square tests, normal CDF).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// A Monte Carlo value with its standard error and seed provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MCEstimate {
    pub value: f64,
    /// Sample standard deviation divided by sqrt(n).
    pub se: f64,
    pub n: usize,
    pub seed: u64,
}

impl MCEstimate {
    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let n = samples.len();
        assert!(n >= 2, "an estimate needs at least two samples");
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        MCEstimate {
            value: mean,
            se: (var / n as f64).sqrt(),
            n,
            seed,
        }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_se(&self, other: &MCEstimate) -> f64 {
        (self.se * self.se + other.se * other.se).sqrt()
    }
}

/// Complex-valued Monte Carlo estimate, components tracked separately.
#[derive(Debug, Clone)]
pub struct ComplexEstimate {
    pub re: MCEstimate,
    pub im: MCEstimate,
}

impl ComplexEstimate {
    pub fn from_samples(re: &[f64], im: &[f64], seed: u64) -> Self {
        ComplexEstimate {
            re: MCEstimate::from_samples(re, seed),
            im: MCEstimate::from_samples(im, seed),
        }
    }

    pub fn value(&self) -> num_complex::Complex64 {
        num_complex::Complex64::new(self.re.value, self.im.value)
    }

    /// Euclidean norm of the component standard errors.
    pub fn se_norm(&self) -> f64 {
        (self.re.se * self.re.se + self.im.se * self.im.se).sqrt()
    }
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        let hi = (i as f64 + 1.0) / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Asymptotic KS critical value at the 1% level.
///
/// `P(sqrt(n) D_n > k) = 0.01` solves to `k = 1.62762`.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let x = sa[i].min(sb[j]);
        while i < n && sa[i] <= x {
            i += 1;
        }
        while j < m && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Two-sample KS critical value at the 1% level.
pub fn ks_two_sample_critical_1pct(n: usize, m: usize) -> f64 {
    1.62762 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Pearson chi-square statistic for observed counts against expected counts.
pub fn chi2_statistic(observed: &[u64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let d = o as f64 - e;
            d * d / e
        })
        .sum()
}

/// Chi-square critical value at the 1% level for `df` degrees of freedom.
///
/// `df = 0` (a single category) never rejects.
pub fn chi2_critical_1pct(df: usize) -> f64 {
    if df == 0 {
        return f64::INFINITY;
    }
    ChiSquared::new(df as f64).unwrap().inverse_cdf(0.99)
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// CDF of Exponential(rate).
pub fn exp_cdf(rate: f64) -> impl Fn(f64) -> f64 {
    move |t| if t <= 0.0 { 0.0 } else { 1.0 - (-rate * t).exp() }
}

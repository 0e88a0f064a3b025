//! Paired significance testing with a normality gate.
//!
//! Two models' per-fold metrics are compared through [`paired_test`]: the
//! paired differences first go through the D'Agostino-Pearson omnibus
//! normality test; when normality is not rejected at 0.05 a one-tailed paired
//! t-test runs, otherwise the one-tailed Wilcoxon signed-rank test. The
//! Wilcoxon branch enumerates its null distribution exactly up to 25 nonzero
//! differences and falls back to the tie-corrected normal approximation
//! beyond that.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("paired samples must have equal lengths: {0} vs {1}")]
    MismatchedPairs(usize, usize),
    #[error("need at least {min} pairs, got {got}")]
    TooFewPairs { min: usize, got: usize },
    #[error("normality test needs n >= 20, got {0}")]
    TooSmallForNormality(usize),
}

/// Significance level shared by the normality gate and the paired tests.
pub const ALPHA_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    TTest,
    Wilcoxon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ABetter,
    BBetter,
    Tied,
}

/// Outcome of one paired model comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceReport {
    /// Omnibus normality p-value of the paired differences; `None` when the
    /// sample was too small for the test to be valid.
    pub normality_p: Option<f64>,
    pub test_used: TestKind,
    pub p_value: f64,
    /// p < 0.05 under the one-tailed alternative "a greater than b".
    pub significant: bool,
    pub direction: Direction,
    pub n_pairs: usize,
    pub note: Option<String>,
}

fn central_moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    (mean, m2 / n, m3 / n, m4 / n)
}

/// Transformed skewness z-score (D'Agostino 1970).
fn skew_z(g1: f64, n: f64) -> f64 {
    let y = g1 * (((n + 1.0) * (n + 3.0)) / (6.0 * (n - 2.0))).sqrt();
    let beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
        / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    let y = if y == 0.0 { 1.0 } else { y };
    delta * (y / alpha + ((y / alpha) * (y / alpha) + 1.0).sqrt()).ln()
}

/// Transformed kurtosis z-score (Anscombe & Glynn 1983).
fn kurtosis_z(b2: f64, n: f64) -> f64 {
    let e = 3.0 * (n - 1.0) / (n + 1.0);
    let var = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) * (n + 1.0) * (n + 3.0) * (n + 5.0));
    let x = (b2 - e) / var.sqrt();
    let sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * ((6.0 * (n + 3.0) * (n + 5.0)) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + (1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt();
    (term1 - term2) / (2.0 / (9.0 * a)).sqrt()
}

/// D'Agostino-Pearson K-squared omnibus test.
///
/// Returns the p-value for the null hypothesis that the sample is normally
/// distributed: skewness and kurtosis z-transforms combined into a statistic
/// that is chi-square with 2 degrees of freedom under the null. A
/// zero-variance sample rejects normality by convention (p = 0).
pub fn dagostino_pearson(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.len() < 20 {
        return Err(StatsError::TooSmallForNormality(xs.len()));
    }
    let n = xs.len() as f64;
    let (_, m2, m3, m4) = central_moments(xs);
    if m2 == 0.0 {
        return Ok(0.0);
    }
    let g1 = m3 / m2.powf(1.5);
    let b2 = m4 / (m2 * m2);
    let z1 = skew_z(g1, n);
    let z2 = kurtosis_z(b2, n);
    let k2 = z1 * z1 + z2 * z2;
    // chi-square survival with 2 dof
    Ok((-k2 / 2.0).exp())
}

/// One-tailed paired t-test p-value for H1: mean(diffs) > 0.
fn paired_t_p(diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        // all diffs identical: either uniformly positive (certain) or not
        return if mean > 0.0 { 0.0 } else { 1.0 };
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid dof");
    1.0 - dist.cdf(t)
}

/// Midranks of absolute differences, doubled so ties stay integral.
fn doubled_midranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].partial_cmp(&abs[j]).expect("finite diffs"));
    let mut doubled = vec![0u64; abs.len()];
    let mut i = 0;
    while i < abs.len() {
        let mut j = i;
        while j + 1 < abs.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i+j+2)/2; doubled = i+j+2
        let doubled_rank = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            doubled[idx] = doubled_rank;
        }
        i = j + 1;
    }
    doubled
}

/// Exact one-tailed Wilcoxon p: P(W+ >= observed) by dynamic programming
/// over all 2^n sign assignments of the (doubled) ranks.
fn wilcoxon_exact_p(doubled_ranks: &[u64], w2_obs: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; (total + 1) as usize];
    counts[0] = 1.0;
    let mut reach = 0u64;
    for &r in doubled_ranks {
        reach += r;
        for s in (0..=reach).rev() {
            if s >= r && counts[(s - r) as usize] > 0.0 {
                counts[s as usize] += counts[(s - r) as usize];
            }
        }
    }
    let ge: f64 = counts[w2_obs as usize..].iter().sum();
    ge / 2.0f64.powi(doubled_ranks.len() as i32)
}

/// One-tailed Wilcoxon signed-rank p-value for H1: a > b (positive diffs).
///
/// Zero differences are dropped. With no nonzero differences the test is
/// vacuous and p = 1. Up to [`WILCOXON_EXACT_MAX`] nonzero pairs the null
/// distribution is enumerated exactly (ties via midranks); beyond that the
/// tie-corrected normal approximation with continuity correction is used.
pub fn wilcoxon_one_tailed(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nz.is_empty() {
        return 1.0;
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let doubled = doubled_midranks(&abs);
    let w2_plus: u64 = nz
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let n = nz.len();
    if n <= WILCOXON_EXACT_MAX {
        return wilcoxon_exact_p(&doubled, w2_plus);
    }
    // normal approximation on the undoubled scale
    let w_plus = w2_plus as f64 / 2.0;
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let sigma2 = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if sigma2 <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mu - 0.5) / sigma2.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    1.0 - normal.cdf(z)
}

/// Nonzero-pair count up to which the Wilcoxon null is enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Normality-gated one-tailed paired comparison, H1: `a` greater than `b`.
pub fn paired_test(a: &[f64], b: &[f64]) -> Result<SignificanceReport, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::MismatchedPairs(a.len(), b.len()));
    }
    if a.len() < 5 {
        return Err(StatsError::TooFewPairs { min: 5, got: a.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;

    let (normality_p, note) = match dagostino_pearson(&diffs) {
        Ok(p) => (Some(p), None),
        Err(StatsError::TooSmallForNormality(n)) => (
            None,
            Some(format!(
                "normality test skipped (n = {n} < 20); using Wilcoxon"
            )),
        ),
        Err(e) => return Err(e),
    };

    let use_t = normality_p.map(|p| p >= ALPHA_LEVEL).unwrap_or(false);
    let (test_used, p_value) = if use_t {
        (TestKind::TTest, paired_t_p(&diffs))
    } else {
        (TestKind::Wilcoxon, wilcoxon_one_tailed(&diffs))
    };

    let direction = if mean_diff > 0.0 {
        Direction::ABetter
    } else if mean_diff < 0.0 {
        Direction::BBetter
    } else {
        Direction::Tied
    };

    Ok(SignificanceReport {
        normality_p,
        test_used,
        p_value,
        significant: p_value < ALPHA_LEVEL,
        direction,
        n_pairs: a.len(),
        note,
    })
}

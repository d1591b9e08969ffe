use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Mean, sample standard deviation and 2.5/97.5 percentile interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Undefined for a single value.
    pub std: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Percentile with linear interpolation between order statistics
/// (position `(n - 1) q` in the sorted values).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_runs(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidInput("no values to summarize".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite metric value".into()));
    }
    let n = values.len();
    // shifted by the first value so constant input yields that value exactly
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Interpolation can land a hair outside the mean for near-constant input.
    let ci_low = percentile(&sorted, 0.025).min(mean);
    let ci_high = percentile(&sorted, 0.975).max(mean);
    Ok(Summary {
        n,
        mean,
        std,
        ci_low,
        ci_high,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    /// Exact null distribution of the signed-rank statistic.
    WilcoxonExact,
    /// Normal approximation with tie correction.
    WilcoxonNormal,
    PairedT,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Largest sample for which the exact signed-rank distribution is used.
pub const EXACT_LIMIT: usize = 25;

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Number of subsets of `{1..n}` with each possible sum.
fn rank_sum_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Wilcoxon signed-rank test on paired differences. Zero differences are
/// dropped. Returns `None` when every difference is zero.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Option<TestResult> {
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return None;
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let has_ties = sorted.windows(2).any(|w| w[0] == w[1]);

    if n <= EXACT_LIMIT && !has_ties {
        let counts = rank_sum_counts(n);
        let total = 2f64.powi(n as i32);
        let w = w_plus.round() as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
        let upper: f64 = counts[w..].iter().sum::<f64>() / total;
        return Some(TestResult {
            method: TestMethod::WilcoxonExact,
            statistic: w_plus,
            p_value: (2.0 * lower.min(upper)).min(1.0),
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * normal.cdf(-z.abs())).min(1.0)
    };
    Some(TestResult {
        method: TestMethod::WilcoxonNormal,
        statistic: w_plus,
        p_value,
    })
}

/// Paired t-test on differences. `None` with fewer than two pairs or when
/// all differences are zero.
pub fn paired_t_test(deltas: &[f64]) -> Option<TestResult> {
    let n = deltas.len();
    if n < 2 || deltas.iter().all(|d| *d == 0.0) {
        return None;
    }
    let nf = n as f64;
    let mean = deltas.iter().sum::<f64>() / nf;
    let sd = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let (statistic, p_value) = if sd == 0.0 {
        (f64::INFINITY.copysign(mean), 0.0)
    } else {
        let t = mean / (sd / nf.sqrt());
        let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("df >= 1");
        (t, (2.0 * dist.cdf(-t.abs())).min(1.0))
    };
    Some(TestResult {
        method: TestMethod::PairedT,
        statistic,
        p_value,
    })
}

//! Wilcoxon signed-rank test, the paired seed-sweep protocol and rank correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest effective sample size tested exactly.
pub const EXACT_MAX_N: usize = 25;
pub const DEFAULT_THRESHOLD: f64 = 0.005;
pub const COMPARE_FORMAT: &str = "fillerlm.compare.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResults {
    pub condition_a: String,
    pub condition_b: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub values_a: Vec<f64>,
    pub values_b: Vec<f64>,
}

impl PairedResults {
    pub fn new(condition_a: impl Into<String>, condition_b: impl Into<String>, metric: impl Into<String>, seeds: Vec<u64>, values_a: Vec<f64>, values_b: Vec<f64>) -> Result<Self> {
        if values_a.len() != values_b.len() || seeds.len() != values_a.len() {
            return Err(Error::InvalidConfig(format!(
                "paired results need equal lengths, got {} seeds, {} and {} values",
                seeds.len(),
                values_a.len(),
                values_b.len()
            )));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate seed in paired results".into()));
        }
        Ok(Self {
            condition_a: condition_a.into(),
            condition_b: condition_b.into(),
            metric: metric.into(),
            seeds,
            values_a,
            values_b,
        })
    }

    pub fn len(&self) -> usize {
        self.values_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_a.is_empty()
    }

    /// `a − b` per seed.
    pub fn differences(&self) -> Vec<f64> {
        self.values_a.iter().zip(&self.values_b).map(|(a, b)| a - b).collect()
    }

    /// Seeds on which `a < b`.
    pub fn wins_a(&self) -> usize {
        self.values_a.iter().zip(&self.values_b).filter(|(a, b)| a < b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n_effective: usize,
    pub p_two_sided: f64,
    pub method: TestMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their ranks.
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

/// Paired two-sided signed-rank test on `a − b`.
pub fn wilcoxon(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidConfig("wilcoxon needs equal-length samples".into()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidConfig("wilcoxon needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n_effective: 0,
            p_two_sided: 1.0,
            method: TestMethod::Exact,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);
    let (p, method) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, statistic), TestMethod::Exact)
    } else {
        (normal_p(&abs, n, statistic), TestMethod::NormalApprox)
    };
    Ok(TestResult {
        statistic,
        w_plus,
        w_minus,
        n_effective: n,
        p_two_sided: p,
        method,
    })
}

pub fn wilcoxon_signed_rank(pairs: &PairedResults) -> Result<TestResult> {
    wilcoxon(&pairs.values_a, &pairs.values_b)
}

/// `min(1, 2·P(W⁺ ≤ w))` under the sign-flip null, counting over doubled
/// ranks so that average ranks stay integral.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (w * 2.0).round() as usize;
    let below: u64 = counts[..=limit].iter().sum();
    let p = 2.0 * below as f64 / 2f64.powi(ranks.len() as i32);
    p.min(1.0)
}

fn normal_p(abs: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * normal.sf(z)).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub format: String,
    pub pairs: PairedResults,
    pub test: TestResult,
    pub threshold: f64,
    pub median_a: f64,
    pub median_b: f64,
    pub significant: bool,
    pub verdict: String,
}

impl Comparison {
    pub fn from_pairs(pairs: PairedResults, threshold: f64) -> Result<Self> {
        let test = wilcoxon_signed_rank(&pairs)?;
        let median_a = median(&pairs.values_a);
        let median_b = median(&pairs.values_b);
        let significant = test.p_two_sided < threshold;
        let order = if median_a < median_b {
            "<"
        } else if median_a > median_b {
            ">"
        } else {
            "="
        };
        let verdict = format!(
            "{} {}: median {:.6} {order} {:.6}, W={} n={} p={:.6} -> {} at {}",
            pairs.metric,
            format_args!("{} vs {}", pairs.condition_a, pairs.condition_b),
            median_a,
            median_b,
            test.statistic,
            test.n_effective,
            test.p_two_sided,
            if significant { "significant" } else { "not significant" },
            threshold
        );
        Ok(Self {
            format: COMPARE_FORMAT.to_string(),
            pairs,
            test,
            threshold,
            median_a,
            median_b,
            significant,
            verdict,
        })
    }
}

/// Runs `experiment` for both conditions on every seed and tests the pairs.
pub fn seed_sweep_compare<C, F>(mut experiment: F, condition_a: &C, condition_b: &C, metric: &str, seeds: &[u64], threshold: f64) -> Result<Comparison>
where
    C: std::fmt::Display,
    F: FnMut(&C, u64) -> Result<f64>,
{
    let mut run = |c: &C, seed: u64| {
        experiment(c, seed).map_err(|e| Error::Experiment {
            seed,
            condition: c.to_string(),
            source: Box::new(e),
        })
    };
    let mut values_a = Vec::with_capacity(seeds.len());
    let mut values_b = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        values_a.push(run(condition_a, seed)?);
        values_b.push(run(condition_b, seed)?);
    }
    let pairs = PairedResults::new(condition_a.to_string(), condition_b.to_string(), metric, seeds.to_vec(), values_a, values_b)?;
    Comparison::from_pairs(pairs, threshold)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    pearson(&average_ranks(&x[..n]), &average_ranks(&y[..n]))
}

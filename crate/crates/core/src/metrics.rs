//! Distances between output distributions and rank correlation.
//!
//! KL and JSD use the natural logarithm, so JSD is bounded by `ln 2`.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Tolerance on the total mass of a [`Distribution`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("not a distribution: {0}")]
    NotADistribution(String),
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricError> {
        if values.is_empty() {
            return Err(MetricError::NotADistribution("empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(MetricError::NotADistribution(format!("entry {v}")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(MetricError::NotADistribution(format!("mass {total}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tvd(&self, other: &Distribution) -> Result<f64, MetricError> {
        tvd(&self.0, &other.0)
    }

    pub fn jsd(&self, other: &Distribution) -> Result<f64, MetricError> {
        jsd(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = MetricError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.0
    }
}

fn same_len(p: &[f64], q: &[f64]) -> Result<(), MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::LengthMismatch(p.len(), q.len()));
    }
    Ok(())
}

/// Total variation distance, half the L1 distance.
///
/// For binary outputs stored as `[1 - p, p]` this is exactly `|p1 - p2|`.
pub fn tvd(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    same_len(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p || m)`, with `0 · ln 0 = 0`.
fn kl(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Jensen–Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    same_len(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let value = 0.5 * kl(p, &m) + 0.5 * kl(q, &m);
    Ok(value.max(0.0))
}

/// Which Kendall coefficient to compute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauVariant {
    /// Tie-corrected coefficient.
    #[default]
    B,
    /// Raw concordance over all pairs.
    A,
}

/// Pair counts behind a Kendall coefficient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// Pairs tied in the first sequence only.
    pub ties_a: u64,
    /// Pairs tied in the second sequence only.
    pub ties_b: u64,
    /// Pairs tied in both.
    pub ties_both: u64,
}

impl PairCounts {
    pub fn total(&self) -> u64 {
        self.concordant + self.discordant + self.ties_a + self.ties_b + self.ties_both
    }

    /// `None` when either sequence is constant.
    pub fn tau(&self, variant: TauVariant) -> Option<f64> {
        let s = self.concordant as f64 - self.discordant as f64;
        match variant {
            TauVariant::A => {
                let n0 = self.total() as f64;
                (n0 > 0.0).then(|| s / n0)
            }
            TauVariant::B => {
                let untied_a = (self.concordant + self.discordant + self.ties_b) as f64;
                let untied_b = (self.concordant + self.discordant + self.ties_a) as f64;
                if untied_a == 0.0 || untied_b == 0.0 {
                    None
                } else {
                    Some(s / (untied_a * untied_b).sqrt())
                }
            }
        }
    }
}

fn cmp(x: f64, y: f64) -> Ordering {
    x.partial_cmp(&y).unwrap_or(Ordering::Equal)
}

/// Pairwise O(n²) classification of all pairs.
pub fn pair_counts(a: &[f64], b: &[f64]) -> Result<PairCounts, MetricError> {
    same_len(a, b)?;
    let mut c = PairCounts::default();
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (cmp(a[i], a[j]), cmp(b[i], b[j])) {
                (Ordering::Equal, Ordering::Equal) => c.ties_both += 1,
                (Ordering::Equal, _) => c.ties_a += 1,
                (_, Ordering::Equal) => c.ties_b += 1,
                (x, y) if x == y => c.concordant += 1,
                _ => c.discordant += 1,
            }
        }
    }
    Ok(c)
}

fn check_input(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    same_len(a, b)?;
    if a.len() < 2 {
        return Err(MetricError::TooShort { needed: 2, got: a.len() });
    }
    Ok(())
}

/// Kendall τ-b. Returns `Ok(None)` when either input is constant, where the
/// coefficient is undefined.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Option<f64>, MetricError> {
    kendall_tau_variant(a, b, TauVariant::B)
}

pub fn kendall_tau_variant(a: &[f64], b: &[f64], variant: TauVariant) -> Result<Option<f64>, MetricError> {
    check_input(a, b)?;
    Ok(pair_counts(a, b)?.tau(variant))
}

/// Kendall τ-b in O(n log n) (Knight's algorithm): sort by `(a, b)`, count
/// ties, then count discordant pairs as swaps of a merge sort on `b`.
pub fn kendall_tau_fast(a: &[f64], b: &[f64]) -> Result<Option<f64>, MetricError> {
    check_input(a, b)?;
    let n = a.len() as u64;
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| cmp(a[i], a[j]).then(cmp(b[i], b[j])));

    let run_pairs = |eq: &dyn Fn(usize, usize) -> bool, order: &[usize]| -> u64 {
        let mut total = 0u64;
        let mut run = 1u64;
        for w in order.windows(2) {
            if eq(w[0], w[1]) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let tied_a = run_pairs(&|i, j| cmp(a[i], a[j]) == Ordering::Equal, &idx);
    let tied_ab = run_pairs(
        &|i, j| cmp(a[i], a[j]) == Ordering::Equal && cmp(b[i], b[j]) == Ordering::Equal,
        &idx,
    );

    let mut keys: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let swaps = merge_count(&mut keys);
    let mut sorted_b = keys;
    sorted_b.sort_by(|x, y| cmp(*x, *y));
    let order: Vec<usize> = (0..sorted_b.len()).collect();
    let tied_b = run_pairs(&|i, j| cmp(sorted_b[i], sorted_b[j]) == Ordering::Equal, &order);

    let n0 = n * (n - 1) / 2;
    let denom_a = (n0 - tied_a) as f64;
    let denom_b = (n0 - tied_b) as f64;
    if denom_a == 0.0 || denom_b == 0.0 {
        return Ok(None);
    }
    // concordant - discordant = n0 - tied_a - tied_b + tied_ab - 2 * swaps
    let s = n0 as f64 - tied_a as f64 - tied_b as f64 + tied_ab as f64 - 2.0 * swaps as f64;
    Ok(Some(s / (denom_a * denom_b).sqrt()))
}

/// Sorts `v` ascending, returning the number of strictly inverted pairs.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if cmp(v[j], v[i]) == Ordering::Less {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Two-sided p-value for τ-b under the normal approximation with the
/// tie-corrected variance of the score `S = concordant - discordant`.
pub fn kendall_p_value(a: &[f64], b: &[f64]) -> Result<Option<f64>, MetricError> {
    check_input(a, b)?;
    let counts = pair_counts(a, b)?;
    if counts.tau(TauVariant::B).is_none() {
        return Ok(None);
    }
    let n = a.len() as f64;
    let ta = tie_groups(a);
    let tb = tie_groups(b);
    let v0 = n * (n - 1.0) * (2.0 * n + 5.0);
    let vt: f64 = ta.iter().map(|&t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let vu: f64 = tb.iter().map(|&t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let t1a: f64 = ta.iter().map(|&t| t * (t - 1.0)).sum();
    let t1b: f64 = tb.iter().map(|&t| t * (t - 1.0)).sum();
    let t2a: f64 = ta.iter().map(|&t| t * (t - 1.0) * (t - 2.0)).sum();
    let t2b: f64 = tb.iter().map(|&t| t * (t - 1.0) * (t - 2.0)).sum();
    let mut var = (v0 - vt - vu) / 18.0 + t1a * t1b / (2.0 * n * (n - 1.0));
    if n > 2.0 {
        var += t2a * t2b / (9.0 * n * (n - 1.0) * (n - 2.0));
    }
    if var <= 0.0 {
        return Ok(None);
    }
    let s = counts.concordant as f64 - counts.discordant as f64;
    let z = s.abs() / var.sqrt();
    Ok(Some(statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)))
}

fn tie_groups(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|x, y| cmp(*x, *y));
    let mut groups = Vec::new();
    let mut run = 1.0;
    for w in s.windows(2) {
        if cmp(w[0], w[1]) == Ordering::Equal {
            run += 1.0;
        } else {
            if run > 1.0 {
                groups.push(run);
            }
            run = 1.0;
        }
    }
    if run > 1.0 {
        groups.push(run);
    }
    groups
}

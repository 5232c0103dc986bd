use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Counts over uniform bins of a declared range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Values outside `[lo, hi]`; they are not binned.
    pub outside: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Binned values (excludes `outside`).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let w = self.width();
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + i as f64 * w;
            let hi = if i + 1 == self.counts.len() { self.hi } else { lo + w };
            let _ = writeln!(out, "{lo:.6},{hi:.6},{c}");
        }
        out
    }
}

/// Bins `values` into `bins` equal-width bins over `[lo, hi]`. The upper edge
/// belongs to the last bin; non-finite and out-of-range values are counted
/// in `outside`.
///
/// # Panics
/// If `bins` is zero or the range is empty.
pub fn emit_histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    assert!(bins >= 1, "histogram needs at least one bin");
    assert!(hi > lo, "histogram range is empty");
    let mut counts = vec![0u64; bins];
    let mut outside = 0;
    let w = (hi - lo) / bins as f64;
    for &v in values {
        if !(lo..=hi).contains(&v) {
            outside += 1;
            continue;
        }
        let i = (((v - lo) / w) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram { lo, hi, counts, outside }
}

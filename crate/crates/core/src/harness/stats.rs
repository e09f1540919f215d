use serde::{Deserialize, Serialize};

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn interquartile_range(x: &[f64]) -> f64 {
    let s = sorted(x);
    quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

/// Moment estimator `m4 / m2^2 - 3`; zero for constant data.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let m = mean(x);
    let (m2, m4) = x.iter().fold((0.0, 0.0), |(a, b), v| {
        let d = (v - m).powi(2);
        (a + d, b + d * d)
    });
    let n = x.len() as f64;
    let (m2, m4) = (m2 / n, m4 / n);
    // Rounding residue of constant data.
    if m2 <= 1e-24 * (m * m).max(f64::MIN_POSITIVE) {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

/// Summary of one group of rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub iqr: f64,
    pub excess_kurtosis: f64,
    pub min: f64,
    pub max: f64,
}

impl GroupStats {
    /// `None` for an empty group.
    pub fn of(x: &[f64]) -> Option<Self> {
        if x.is_empty() {
            return None;
        }
        let s = sorted(x);
        Some(GroupStats {
            n: x.len(),
            mean: mean(x),
            variance: variance(x),
            iqr: quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25),
            excess_kurtosis: excess_kurtosis(x),
            min: s[0],
            max: s[s.len() - 1],
        })
    }
}

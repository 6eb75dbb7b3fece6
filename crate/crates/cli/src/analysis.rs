//! Reductions of trajectory logs used by the summary and acceptance checks.

use sgdlab_core::{MetricRecord, TrajectoryLog};

/// Median; the mean of the middle pair for even lengths. NaNs sort last.
pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// Median train loss over records in `(dp/2, dp]`.
pub fn plateau_median(log: &TrajectoryLog, dp: usize) -> Option<f64> {
    median(log.records.iter().filter(|r| r.iteration > dp / 2 && r.iteration <= dp).map(|r| r.train_loss).collect())
}

/// Train-loss range `(min, max)` over records in `(lo, hi]`.
pub fn loss_range(log: &TrajectoryLog, lo: usize, hi: usize) -> Option<(f64, f64)> {
    let w: Vec<f64> = log.records.iter().filter(|r| r.iteration > lo && r.iteration <= hi).map(|r| r.train_loss).collect();
    if w.is_empty() {
        return None;
    }
    Some(w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))))
}

/// First iteration at which the train loss is within a factor 10 of `level`.
pub fn stabilization_onset(log: &TrajectoryLog, level: f64) -> Option<usize> {
    log.records.iter().find(|r| r.train_loss <= 10.0 * level).map(|r| r.iteration)
}

/// Last record at or before `t` that carries the expensive metrics.
pub fn full_record_at(log: &TrajectoryLog, t: usize) -> Option<&MetricRecord> {
    log.records.iter().filter(|r| r.iteration <= t && r.max_col_norm.is_some()).last()
}

/// Fraction of `supp(truth)` inside the detected support of `estimate`
/// (entries with `|β_j| ≥ rel · max|β|`).
pub fn support_coverage(estimate: &[f64], truth: &[f64], rel: f64) -> f64 {
    let scale = estimate.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let on: Vec<usize> = (0..truth.len()).filter(|&j| truth[j] != 0.0).collect();
    if on.is_empty() {
        return 1.0;
    }
    let hit = on.iter().filter(|&&j| scale > 0.0 && estimate[j].abs() >= rel * scale).count();
    hit as f64 / on.len() as f64
}

/// Adjacent pairs where the sequence goes up.
pub fn adjacent_inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0] || w[1].is_nan()).count()
}

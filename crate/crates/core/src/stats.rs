//! Summary statistics over a utilization series.
//!
//! Percentiles use the nearest-rank rule: the `q`-th percentile of `n` sorted
//! values is the element at index `ceil(q * n / 100) - 1`. The rank is computed
//! in integer arithmetic so `q = 95, n = 100` lands on index 94 and not on a
//! float-rounded 95.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("series is empty")]
    EmptySeries,
    #[error("allocated capacity must be positive")]
    NonPositiveAllocation,
}

/// Zero-based nearest-rank index for percentile `percent` over `n` values.
pub fn nearest_rank(n: usize, percent: u32) -> usize {
    debug_assert!(percent <= 100);
    let rank = (percent as usize * n).div_ceil(100);
    rank.saturating_sub(1).min(n.saturating_sub(1))
}

/// Nearest-rank percentile of an already sorted slice.
pub fn percentile_sorted(sorted: &[f64], percent: u32) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    Some(sorted[nearest_rank(sorted.len(), percent)])
}

/// Nearest-rank percentile of an unsorted slice.
pub fn percentile(values: &[f64], percent: u32) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, percent)
}

/// Nearest-rank P95, the binding statistic for sizing.
pub fn p95(values: &[f64]) -> Option<f64> {
    percentile(values, 95)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Population variance (divides by `n`).
pub fn population_variance(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    Some(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub p95: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub variance: f64,
    /// `allocated - p95`; negative when the resource runs above its allocation.
    pub slack: f64,
    pub sample_count: usize,
    pub allocated: f64,
}

impl SeriesStats {
    pub fn p95_utilization(&self) -> f64 {
        self.p95 / self.allocated
    }

    pub fn mean_utilization(&self) -> f64 {
        self.mean / self.allocated
    }
}

pub fn compute_stats(series: &[f64], allocated: f64) -> Result<SeriesStats, StatsError> {
    if series.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    if !(allocated > 0.0) {
        return Err(StatsError::NonPositiveAllocation);
    }
    let mut sorted: Vec<f64> = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    let p95 = sorted[nearest_rank(sorted.len(), 95)];
    // Summation error can push the mean of near-identical values just outside
    // [min, max].
    let mean = (series.iter().sum::<f64>() / series.len() as f64).clamp(min, max);
    let variance =
        series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / series.len() as f64;
    Ok(SeriesStats {
        p95,
        min,
        max,
        mean,
        variance,
        slack: allocated - p95,
        sample_count: series.len(),
        allocated,
    })
}

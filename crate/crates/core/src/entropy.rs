//! Sample entropy (SampEn) of a series.
//!
//! With `T = n - m` templates of length `m` starting at indices `0..T`, `B`
//! counts unordered template pairs whose Chebyshev distance is at most `r` and
//! `A` counts the pairs that still match when both templates are extended by
//! one sample. Self-matches are never counted. `SampEn = -ln(A / B)`.
//!
//! When no extended template matches (`A = 0`) the value is undefined; it is
//! capped at `ln(B * (B - 1))`, or `ln(T * (T - 1))` when fewer than two
//! short templates match.
//!
//! Counting is done on a grid of cells `r` wide keyed by the first two
//! template coordinates, so only templates in neighbouring cells are ever
//! compared. The counts are identical to the quadratic definition.

use alloc::vec::Vec;
use thiserror::Error;

use crate::math;

pub const DEFAULT_EMBEDDING: usize = 2;
pub const DEFAULT_TOLERANCE_FACTOR: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("series of length {len} is too short for embedding length {m} (need at least {needed})")]
    SeriesTooShort { len: usize, m: usize, needed: usize },
    #[error("tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("embedding length must be at least 1")]
    InvalidEmbedding,
}

/// Template match counts behind a sample entropy value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateCounts {
    /// Number of templates of length `m` (`n - m`).
    pub templates: u64,
    /// Matching pairs of length `m` (`B`).
    pub shorter: u64,
    /// Matching pairs of length `m + 1` (`A`).
    pub longer: u64,
}

impl TemplateCounts {
    /// `-ln(A / B)`, capped when `A = 0`.
    pub fn entropy(&self) -> f64 {
        if self.longer == 0 {
            let b = if self.shorter >= 2 { self.shorter } else { self.templates.max(2) };
            return math::ln(b as f64 * (b - 1) as f64);
        }
        -math::ln(self.longer as f64 / self.shorter as f64)
    }
}

/// Sample entropy with explicit embedding length `m` and tolerance `r`.
pub fn sample_entropy(series: &[f64], m: usize, r: f64) -> Result<f64, EntropyError> {
    Ok(template_matches(series, m, r)?.entropy())
}

/// Sample entropy with `m = 2` and `r = 0.2` times the population standard
/// deviation. A series with zero spread is perfectly regular and scores 0.
pub fn sample_entropy_default(series: &[f64]) -> Result<f64, EntropyError> {
    check_length(series.len(), DEFAULT_EMBEDDING)?;
    let std = population_std(series);
    if std == 0.0 {
        return Ok(0.0);
    }
    sample_entropy(series, DEFAULT_EMBEDDING, DEFAULT_TOLERANCE_FACTOR * std)
}

pub(crate) fn population_std(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    math::sqrt(series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

fn check_length(len: usize, m: usize) -> Result<(), EntropyError> {
    if m == 0 {
        return Err(EntropyError::InvalidEmbedding);
    }
    if len < m + 2 {
        return Err(EntropyError::SeriesTooShort { len, m, needed: m + 2 });
    }
    Ok(())
}

/// Counts `A` and `B` for the given embedding length and tolerance.
pub fn template_matches(series: &[f64], m: usize, r: f64) -> Result<TemplateCounts, EntropyError> {
    check_length(series.len(), m)?;
    if !(r > 0.0) || !r.is_finite() {
        return Err(EntropyError::InvalidTolerance(r));
    }
    // Cells slightly wider than r: two values within r of each other always
    // land in the same or adjacent cells despite rounding in the division.
    let width = r * (1.0 + 1e-6);
    let max_cell = series.iter().fold(0.0f64, |acc, v| acc.max(math::abs(*v))) / width;
    if !max_cell.is_finite() || max_cell > 1e9 {
        return Ok(quadratic_counts(series, m, r));
    }
    Ok(grid_counts(series, m, r, width))
}

#[inline]
fn matches(series: &[f64], i: usize, j: usize, len: usize, r: f64) -> bool {
    (0..len).all(|k| math::abs(series[i + k] - series[j + k]) <= r)
}

fn quadratic_counts(series: &[f64], m: usize, r: f64) -> TemplateCounts {
    let templates = series.len() - m;
    let (mut shorter, mut longer) = (0u64, 0u64);
    for i in 0..templates {
        for j in (i + 1)..templates {
            if matches(series, i, j, m, r) {
                shorter += 1;
                if math::abs(series[i + m] - series[j + m]) <= r {
                    longer += 1;
                }
            }
        }
    }
    TemplateCounts { templates: templates as u64, shorter, longer }
}

fn grid_counts(series: &[f64], m: usize, r: f64, width: f64) -> TemplateCounts {
    let templates = series.len() - m;
    let cell = |v: f64| math::floor(v / width) as i64;
    let two_d = m >= 2;
    let key = |i: usize| -> (i64, i64) {
        (cell(series[i]), if two_d { cell(series[i + 1]) } else { 0 })
    };

    let mut entries: Vec<(i64, i64, usize)> = (0..templates)
        .map(|i| {
            let (a, b) = key(i);
            (a, b, i)
        })
        .collect();
    entries.sort_unstable();

    let second_offsets: &[i64] = if two_d { &[-1, 0, 1] } else { &[0] };
    let (mut shorter, mut longer) = (0u64, 0u64);
    for i in 0..templates {
        let (c0, c1) = key(i);
        for d0 in [-1i64, 0, 1] {
            for &d1 in second_offsets {
                let target = (c0 + d0, c1 + d1);
                let lo = entries.partition_point(|e| (e.0, e.1) < target);
                for e in entries[lo..].iter().take_while(|e| (e.0, e.1) == target) {
                    let j = e.2;
                    if j <= i {
                        continue;
                    }
                    if matches(series, i, j, m, r) {
                        shorter += 1;
                        if math::abs(series[i + m] - series[j + m]) <= r {
                            longer += 1;
                        }
                    }
                }
            }
        }
    }
    TemplateCounts { templates: templates as u64, shorter, longer }
}

//! Complexity-based model selection and the three forecasters.
//!
//! The selector looks at the variance of the (allocation-normalized) series,
//! its autocorrelation at daily and weekly lags, and its sample entropy:
//!
//! * variance below `variance_epsilon` selects the constant forecaster;
//! * a dominant seasonal lag with autocorrelation at least `acf_floor`,
//!   together with sample entropy at most `entropy_ceiling`, selects the
//!   seasonal-trend forecaster;
//! * everything else goes to the autoregressive forecaster, an AR(p) model on
//!   the first differences with `p <= 3` (the ARIMA(p,1,0) shape).
//!
//! A lag is only dominant when its autocorrelation also beats the
//! autocorrelation at half the lag. Trending series (random walks, ramps) are
//! strongly autocorrelated at every lag, but their autocorrelation decays
//! with the lag instead of peaking at the period.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{sample_entropy_default, EntropyError};
use crate::math;
use crate::stats;
use crate::time::{Millis, DAY_MS, WEEK_MS};

pub const MIN_SERIES_LEN: usize = 16;
pub const MAX_AR_ORDER: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForecastError {
    #[error("series of length {len} is shorter than the minimum {min}")]
    SeriesTooShort { len: usize, min: usize },
    #[error("sampling period must be positive")]
    InvalidPeriod,
    #[error("horizon {horizon_ms} ms holds no full sampling period of {period_ms} ms")]
    EmptyHorizon { horizon_ms: Millis, period_ms: Millis },
    #[error("autoregressive fit is singular for every order up to {MAX_AR_ORDER}")]
    SingularFit,
    #[error("seasonal forecaster needs a seasonal lag")]
    MissingSeasonalLag,
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Constant,
    SeasonalTrend,
    Autoregressive,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Constant => "constant",
            ModelKind::SeasonalTrend => "seasonal_trend",
            ModelKind::Autoregressive => "autoregressive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub variance_epsilon: f64,
    pub entropy_ceiling: f64,
    pub acf_floor: f64,
    /// Candidate seasonal periods as durations; converted to lags using the
    /// sampling period.
    pub seasonal_periods_ms: Vec<Millis>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            variance_epsilon: 1e-6,
            entropy_ceiling: 0.5,
            acf_floor: 0.5,
            seasonal_periods_ms: vec![DAY_MS, WEEK_MS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChoice {
    pub kind: ModelKind,
    pub entropy: f64,
    pub variance: f64,
    /// Dominant seasonal lag in samples, when one was found.
    pub seasonal_lag: Option<usize>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub horizon_ms: Millis,
    pub period_ms: Millis,
    pub values: Vec<(Millis, f64)>,
    pub model: ModelChoice,
    pub p95_forecast: f64,
    /// True when the requested model could not be fitted and the constant
    /// forecaster stood in.
    pub fallback: bool,
}

/// Sample autocorrelation at `lag` (biased estimator, normalized by the
/// lag-0 sum of squares). Returns 0 for a flat series or a lag past the end.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    if lag >= n {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = (0..n - lag).map(|t| (series[t] - mean) * (series[t + lag] - mean)).sum();
    num / denom
}

/// The seasonal lag with the strongest qualifying autocorrelation, if any.
pub fn dominant_seasonal_lag(
    series: &[f64],
    period_ms: Millis,
    cfg: &SelectorConfig,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &p in &cfg.seasonal_periods_ms {
        if period_ms <= 0 || p < 2 * period_ms {
            continue;
        }
        let lag = (p / period_ms) as usize;
        if series.len() < 2 * lag {
            continue;
        }
        let acf = autocorrelation(series, lag);
        if acf < cfg.acf_floor || acf <= autocorrelation(series, lag / 2) {
            continue;
        }
        if best.is_none_or(|(_, b)| acf > b) {
            best = Some((lag, acf));
        }
    }
    best
}

/// Picks a forecaster for `series`, which should already be normalized by
/// the allocation so `variance_epsilon` is scale-free.
pub fn select_model(
    series: &[f64],
    period_ms: Millis,
    cfg: &SelectorConfig,
) -> Result<ModelChoice, ForecastError> {
    if series.len() < MIN_SERIES_LEN {
        return Err(ForecastError::SeriesTooShort { len: series.len(), min: MIN_SERIES_LEN });
    }
    if period_ms <= 0 {
        return Err(ForecastError::InvalidPeriod);
    }
    let variance = stats::population_variance(series).unwrap_or(0.0);
    let entropy = sample_entropy_default(series)?;

    if variance < cfg.variance_epsilon {
        return Ok(ModelChoice {
            kind: ModelKind::Constant,
            entropy,
            variance,
            seasonal_lag: None,
            rationale: format!(
                "variance {:.3e} < {:.1e}, sample entropy {:.4}: constant (not chosen: seasonal_trend, autoregressive)",
                variance, cfg.variance_epsilon, entropy
            ),
        });
    }

    let seasonal = dominant_seasonal_lag(series, period_ms, cfg);
    match seasonal {
        Some((lag, acf)) if entropy <= cfg.entropy_ceiling => Ok(ModelChoice {
            kind: ModelKind::SeasonalTrend,
            entropy,
            variance,
            seasonal_lag: Some(lag),
            rationale: format!(
                "variance {:.3e}, autocorrelation {:.4} at lag {} >= {:.2}, sample entropy {:.4} <= {:.2}: seasonal_trend (not chosen: autoregressive)",
                variance, acf, lag, cfg.acf_floor, entropy, cfg.entropy_ceiling
            ),
        }),
        Some((lag, acf)) => Ok(ModelChoice {
            kind: ModelKind::Autoregressive,
            entropy,
            variance,
            seasonal_lag: Some(lag),
            rationale: format!(
                "variance {:.3e}, autocorrelation {:.4} at lag {} but sample entropy {:.4} > {:.2}: autoregressive (not chosen: seasonal_trend)",
                variance, acf, lag, entropy, cfg.entropy_ceiling
            ),
        }),
        None => Ok(ModelChoice {
            kind: ModelKind::Autoregressive,
            entropy,
            variance,
            seasonal_lag: None,
            rationale: format!(
                "variance {:.3e}, no seasonal lag with autocorrelation >= {:.2}, sample entropy {:.4}: autoregressive (not chosen: seasonal_trend)",
                variance, cfg.acf_floor, entropy
            ),
        }),
    }
}

/// Least-squares AR(p) model on first differences.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    pub coefficients: Vec<f64>,
    pub sse: f64,
}

impl ArModel {
    pub fn order(&self) -> usize {
        self.coefficients.len()
    }
}

/// Fits AR(p) for `p` in `1..=3` on the differenced series and keeps the
/// order with the smallest squared error over the rows all orders share.
/// Orders whose normal equations are singular, or whose coefficients sum in
/// absolute value past 1 (explosive over a long horizon), are skipped.
pub fn fit_autoregressive(series: &[f64]) -> Result<ArModel, ForecastError> {
    if series.len() < MIN_SERIES_LEN {
        return Err(ForecastError::SeriesTooShort { len: series.len(), min: MIN_SERIES_LEN });
    }
    let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let mut best: Option<ArModel> = None;
    for p in 1..=MAX_AR_ORDER {
        let Some(coefficients) = fit_order(&diffs, p) else { continue };
        let l1: f64 = coefficients.iter().map(|c| math::abs(*c)).sum();
        if l1 > 1.0 + 1e-9 {
            continue;
        }
        let sse: f64 = (MAX_AR_ORDER..diffs.len())
            .map(|t| {
                let pred: f64 = (0..p).map(|k| coefficients[k] * diffs[t - 1 - k]).sum();
                (diffs[t] - pred) * (diffs[t] - pred)
            })
            .sum();
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(ArModel { coefficients, sse });
        }
    }
    best.ok_or(ForecastError::SingularFit)
}

fn fit_order(diffs: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut xtx = vec![vec![0.0f64; p]; p];
    let mut xty = vec![0.0f64; p];
    for t in p..diffs.len() {
        for a in 0..p {
            let xa = diffs[t - 1 - a];
            xty[a] += xa * diffs[t];
            for b in 0..p {
                xtx[a][b] += xa * diffs[t - 1 - b];
            }
        }
    }
    solve(xtx, xty)
}

/// Gaussian elimination with partial pivoting; `None` when a pivot is
/// negligible relative to the largest diagonal entry.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| math::abs(a[i][i])).fold(0.0f64, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    let tol = scale * 1e-12;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| math::abs(a[x][col]).total_cmp(&math::abs(a[y][col])))
            .unwrap_or(col);
        if math::abs(a[pivot][col]) <= tol {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let s: f64 = ((row + 1)..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn constant_values(series: &[f64], steps: usize) -> Vec<f64> {
    vec![series[series.len() - 1]; steps]
}

fn seasonal_values(series: &[f64], lag: usize, steps: usize) -> Vec<f64> {
    let n = series.len();
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let y_mean = series.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, y) in series.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = y_mean - slope * t_mean;

    let mut sums = vec![0.0f64; lag];
    let mut counts = vec![0usize; lag];
    for (t, y) in series.iter().enumerate() {
        sums[t % lag] += y - (intercept + slope * t as f64);
        counts[t % lag] += 1;
    }
    let profile: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect();

    (n..n + steps)
        .map(|t| intercept + slope * t as f64 + profile[t % lag])
        .collect()
}

fn autoregressive_values(series: &[f64], model: &ArModel, steps: usize) -> Vec<f64> {
    let p = model.order();
    let n = series.len();
    let mut recent: Vec<f64> = (0..p).map(|k| series[n - 1 - k] - series[n - 2 - k]).collect();
    let mut level = series[n - 1];
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let d: f64 = model.coefficients.iter().zip(&recent).map(|(c, x)| c * x).sum();
        level += d;
        out.push(level);
        recent.rotate_right(1);
        recent[0] = d;
    }
    out
}

/// Projects `series` forward over `horizon_ms` at `period_ms` spacing using
/// the chosen model. `origin` is the timestamp of the last observed sample.
pub fn forecast(
    series: &[f64],
    model: &ModelChoice,
    origin: Millis,
    period_ms: Millis,
    horizon_ms: Millis,
) -> Result<Forecast, ForecastError> {
    if series.len() < MIN_SERIES_LEN {
        return Err(ForecastError::SeriesTooShort { len: series.len(), min: MIN_SERIES_LEN });
    }
    if period_ms <= 0 {
        return Err(ForecastError::InvalidPeriod);
    }
    let steps = crate::time::samples_in(horizon_ms, period_ms);
    if steps == 0 {
        return Err(ForecastError::EmptyHorizon { horizon_ms, period_ms });
    }

    let mut used_model = model.clone();
    let mut fallback = false;
    let raw = match model.kind {
        ModelKind::Constant => constant_values(series, steps),
        ModelKind::SeasonalTrend => {
            let lag = model.seasonal_lag.ok_or(ForecastError::MissingSeasonalLag)?;
            seasonal_values(series, lag.max(1), steps)
        }
        ModelKind::Autoregressive => match fit_autoregressive(series) {
            Ok(ar) => {
                used_model.rationale = format!("{}; AR({}) on differences", model.rationale, ar.order());
                autoregressive_values(series, &ar, steps)
            }
            Err(ForecastError::SingularFit) => {
                fallback = true;
                used_model.kind = ModelKind::Constant;
                used_model.rationale =
                    format!("{}; autoregressive fit singular, constant fallback", model.rationale);
                constant_values(series, steps)
            }
            Err(e) => return Err(e),
        },
    };

    let p95_forecast = stats::p95(&raw).unwrap_or(0.0);
    let values = raw
        .into_iter()
        .enumerate()
        .map(|(k, v)| (origin + (k as Millis + 1) * period_ms, v))
        .collect();
    Ok(Forecast { horizon_ms, period_ms, values, model: used_model, p95_forecast, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::{DEFAULT_SAMPLING_MS, WEEK_MS};

    fn sine(n: usize, period: usize) -> Vec<f64> {
        (0..n)
            .map(|t| 1.0 + 0.5 * libm::sin(2.0 * core::f64::consts::PI * t as f64 / period as f64))
            .collect()
    }

    #[test]
    fn constant_series_selects_constant() {
        let c = select_model(&vec![5.0; 100], DEFAULT_SAMPLING_MS, &SelectorConfig::default()).unwrap();
        assert_eq!(c.kind, ModelKind::Constant);
        assert_eq!(c.entropy, 0.0);
        assert!(c.rationale.contains("not chosen"));
    }

    #[test]
    fn daily_sine_selects_seasonal() {
        let s = sine(2016, 288);
        let c = select_model(&s, DEFAULT_SAMPLING_MS, &SelectorConfig::default()).unwrap();
        assert_eq!(c.kind, ModelKind::SeasonalTrend);
        assert_eq!(c.seasonal_lag, Some(288));
    }

    #[test]
    fn too_short() {
        assert!(matches!(
            select_model(&[1.0; 10], DEFAULT_SAMPLING_MS, &SelectorConfig::default()),
            Err(ForecastError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn constant_forecast_repeats_last_value() {
        let model = select_model(&vec![5.0; 100], DEFAULT_SAMPLING_MS, &SelectorConfig::default()).unwrap();
        let f = forecast(&vec![5.0; 100], &model, 0, DEFAULT_SAMPLING_MS, WEEK_MS).unwrap();
        assert_eq!(f.values.len(), 2016);
        assert!(f.values.iter().all(|(_, v)| *v == 5.0));
        assert_eq!(f.p95_forecast, 5.0);
        assert_eq!(f.values[0].0, DEFAULT_SAMPLING_MS);
        assert_eq!(f.values[2015].0, WEEK_MS);
    }

    #[test]
    fn flat_series_ar_fit_is_singular_and_falls_back() {
        let model = ModelChoice {
            kind: ModelKind::Autoregressive,
            entropy: 0.0,
            variance: 0.0,
            seasonal_lag: None,
            rationale: "forced".into(),
        };
        assert_eq!(fit_autoregressive(&vec![2.0; 40]), Err(ForecastError::SingularFit));
        let f = forecast(&vec![2.0; 40], &model, 0, DEFAULT_SAMPLING_MS, DAY_MS).unwrap();
        assert!(f.fallback);
        assert_eq!(f.model.kind, ModelKind::Constant);
        assert!(f.model.rationale.contains("fallback"));
    }

    #[test]
    fn ramp_fits_unit_ar1() {
        let ramp: Vec<f64> = (0..100).map(|t| 0.5 * t as f64).collect();
        let ar = fit_autoregressive(&ramp).unwrap();
        assert_eq!(ar.order(), 1);
        assert!((ar.coefficients[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_horizon_rejected() {
        let model = select_model(&vec![5.0; 100], DEFAULT_SAMPLING_MS, &SelectorConfig::default()).unwrap();
        assert!(matches!(
            forecast(&vec![5.0; 100], &model, 0, DEFAULT_SAMPLING_MS, 1000),
            Err(ForecastError::EmptyHorizon { .. })
        ));
    }
}

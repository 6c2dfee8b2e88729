//! Forecast error metrics: RMSE, MAPE and SMAPE.
//!
//! Values are canonical: MAPE is a fraction, SMAPE lies in `[0, 2]`. Display
//! scaling to percent happens only when reports are rendered.

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {actual} actual vs {predicted} predicted values")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("no values to score")]
    Empty,
    #[error("every term had a zero denominator")]
    AllTermsSkipped,
    #[error("base SMAPE must be positive to compute an improvement")]
    ZeroBase,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// A percentage-style error together with its zero-denominator bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratio {
    pub value: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsResult {
    pub rmse: f64,
    /// `None` when every actual value was zero.
    pub mape: Option<f64>,
    /// `None` when every actual/predicted pair was zero.
    pub smape: Option<f64>,
    /// Terms used by MAPE.
    pub n_used: usize,
    /// Terms MAPE skipped for a zero actual value.
    pub n_skipped_zero_denominator: usize,
}

fn check(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch { actual: actual.len(), predicted: predicted.len() });
    }
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check(actual, predicted)?;
    let sse: f64 = actual.iter().zip(predicted).map(|(y, p)| (p - y) * (p - y)).sum();
    Ok((sse / actual.len() as f64).sqrt())
}

fn mean_ratio(actual: &[f64], predicted: &[f64], term: impl Fn(f64, f64) -> Option<f64>) -> Result<Ratio> {
    check(actual, predicted)?;
    let (sum, used) = actual
        .iter()
        .zip(predicted)
        .filter_map(|(&y, &p)| term(y, p))
        .fold((0.0, 0usize), |(s, n), t| (s + t, n + 1));
    if used == 0 {
        return Err(MetricsError::AllTermsSkipped);
    }
    Ok(Ratio { value: sum / used as f64, n_used: used, n_skipped: actual.len() - used })
}

/// Mean absolute percentage error as a fraction; terms with `|y| <= eps` are
/// skipped and counted.
pub fn mape_with_eps(actual: &[f64], predicted: &[f64], eps: f64) -> Result<Ratio> {
    mean_ratio(actual, predicted, |y, p| (y.abs() > eps).then(|| (y - p).abs() / y.abs()))
}

pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<Ratio> {
    mape_with_eps(actual, predicted, DEFAULT_EPS)
}

/// Symmetric MAPE in `[0, 2]`; terms whose mean magnitude is `<= eps` are
/// skipped and counted.
pub fn smape_with_eps(actual: &[f64], predicted: &[f64], eps: f64) -> Result<Ratio> {
    mean_ratio(actual, predicted, |y, p| {
        let denom = (p.abs() + y.abs()) / 2.0;
        (denom > eps).then(|| (p - y).abs() / denom)
    })
}

pub fn smape(actual: &[f64], predicted: &[f64]) -> Result<Ratio> {
    smape_with_eps(actual, predicted, DEFAULT_EPS)
}

/// Relative SMAPE reduction in percent.
pub fn smape_improvement(base_smape: f64, reslearn_smape: f64) -> Result<f64> {
    if !(base_smape > 0.0) {
        return Err(MetricsError::ZeroBase);
    }
    Ok(100.0 * (base_smape - reslearn_smape) / base_smape)
}

/// All three metrics at once.
pub fn evaluate(actual: &[f64], predicted: &[f64]) -> Result<MetricsResult> {
    let rmse = rmse(actual, predicted)?;
    let optional = |r: Result<Ratio>| match r {
        Ok(r) => Ok(Some(r)),
        Err(MetricsError::AllTermsSkipped) => Ok(None),
        Err(e) => Err(e),
    };
    let mape = optional(mape(actual, predicted))?;
    let smape = optional(smape(actual, predicted))?;
    Ok(MetricsResult {
        rmse,
        mape: mape.map(|r| r.value),
        smape: smape.map(|r| r.value),
        n_used: mape.map_or(0, |r| r.n_used),
        n_skipped_zero_denominator: mape.map_or(actual.len(), |r| r.n_skipped),
    })
}

/// Mean absolute error over the positions whose actual value is in the top
/// decile (at or above the 90th percentile).
pub fn top_decile_mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check(actual, predicted)?;
    let mut sorted = actual.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let cut = sorted[((sorted.len() as f64) * 0.9).floor() as usize];
    let (sum, n) = actual
        .iter()
        .zip(predicted)
        .filter(|(y, _)| **y >= cut)
        .fold((0.0, 0usize), |(s, n), (y, p)| (s + (y - p).abs(), n + 1));
    Ok(sum / n as f64)
}

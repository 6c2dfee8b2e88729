//! Series preparation: segmentation, chronological splits, scaling,
//! windowing, and the predictability checks (rolling mean, runs test).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::viewframe::SegmentFeatures;

pub const DEFAULT_SEGMENT_SIZE: usize = 500;
pub const DEFAULT_LOOKBACK: usize = 32;
pub const DEFAULT_ROLLING_WINDOW: usize = 20;
/// Smallest segment size accepted by experiment configs.
pub const MIN_SEGMENT_SIZE: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PrepError {
    #[error("series too short: need {needed} values, have {have}")]
    SeriesTooShort { needed: usize, have: usize },
    #[error("segment size {0} is too small")]
    SegmentSizeTooSmall(usize),
    #[error("split too small: {0}")]
    SplitTooSmall(String),
    #[error("invalid split ratios: {0}")]
    BadSplit(String),
    #[error("series is degenerate for the runs test: {0}")]
    DegenerateSeries(String),
    #[error("series contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("feature `{0}` has no valid values to impute from")]
    NoValidValues(Feature),
    #[error("window must be at least 1")]
    BadWindow,
}

pub type Result<T> = std::result::Result<T, PrepError>;

/// Which frame feature a series carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    #[serde(rename = "f_c")]
    Count,
    #[serde(rename = "f_s")]
    Size,
    #[serde(rename = "f_iat")]
    Iat,
}

impl Feature {
    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Count => "f_c",
            Feature::Size => "f_s",
            Feature::Iat => "f_iat",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Feature {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f_c" => Ok(Feature::Count),
            "f_s" => Ok(Feature::Size),
            "f_iat" => Ok(Feature::Iat),
            o => Err(format!("unknown feature `{o}` (expected f_c, f_s or f_iat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub feature: Feature,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, feature: Feature) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PrepError::NonFinite(i));
        }
        Ok(Self { values, feature })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Column of a per-segment feature table. Absent IATs take the previous
    /// valid value; leading absents take the first valid one.
    pub fn from_features(features: &[SegmentFeatures], feature: Feature) -> Result<Self> {
        let raw: Vec<Option<f64>> = features
            .iter()
            .map(|f| match feature {
                Feature::Count => Some(f.f_c as f64),
                Feature::Size => Some(f.f_s as f64),
                Feature::Iat => f.f_iat,
            })
            .collect();
        let first = raw.iter().flatten().next().copied().ok_or(PrepError::NoValidValues(feature))?;
        let mut last = first;
        let values = raw
            .into_iter()
            .map(|v| {
                if let Some(x) = v {
                    last = x;
                }
                last
            })
            .collect();
        Self::new(values, feature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedSeries {
    pub segments: Vec<TimeSeries>,
    pub segment_size: usize,
    /// Trailing values that did not fill a whole segment.
    pub dropped: usize,
}

impl SegmentedSeries {
    pub fn count(&self) -> usize {
        self.segments.len()
    }
}

/// Cut a series into contiguous, non-overlapping segments of `n` values.
pub fn segment(series: &TimeSeries, n: usize) -> Result<SegmentedSeries> {
    if n == 0 {
        return Err(PrepError::SegmentSizeTooSmall(n));
    }
    if series.len() < n {
        return Err(PrepError::SeriesTooShort { needed: n, have: series.len() });
    }
    let segments = series
        .values
        .chunks_exact(n)
        .map(|c| TimeSeries { values: c.to_vec(), feature: series.feature })
        .collect();
    Ok(SegmentedSeries { segments, segment_size: n, dropped: series.len() % n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of the segment used for the train pool (train + val).
    pub train_ratio: f64,
    /// Fraction of the train pool, taken from its end, used for validation.
    pub val_ratio: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_ratio: 0.5, val_ratio: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train_ratio", self.train_ratio), ("val_ratio", self.val_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(PrepError::BadSplit(format!("{name} = {r} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Index ranges of a chronological three-way split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

// guards against 0.2 * 250 landing on 49.999...
fn portion(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Chronological split: train pool first, test last; the tail of the train
/// pool is validation.
///
/// The train part must yield at least `lookback + 1` windows (so
/// `2 * lookback + 1` points). Validation and test windows draw their input
/// history from the points just before them, so those parts only need to be
/// non-empty.
pub fn split(len: usize, spec: &SplitSpec, lookback: usize) -> Result<SplitRanges> {
    spec.validate()?;
    let pool = portion(len, spec.train_ratio);
    let val = portion(pool, spec.val_ratio);
    let train = pool - val;
    let test = len - pool;
    if train < 2 * lookback + 1 {
        return Err(PrepError::SplitTooSmall(format!(
            "train part has {train} points, lookback {lookback} needs {}",
            2 * lookback + 1
        )));
    }
    if val == 0 || test == 0 {
        return Err(PrepError::SplitTooSmall(format!("val {val} / test {test} points; both must be non-empty")));
    }
    Ok(SplitRanges { train: 0..train, val: train..pool, test: pool..len })
}

/// Trailing rolling mean; the first `window - 1` positions are dropped.
pub fn rolling_mean(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(PrepError::BadWindow);
    }
    if values.len() < window {
        return Err(PrepError::SeriesTooShort { needed: window, have: values.len() });
    }
    let w = window as f64;
    let mut sum: f64 = values[..window].iter().sum();
    let mut out = Vec::with_capacity(values.len() - window + 1);
    out.push(sum / w);
    for i in window..values.len() {
        let start = i + 1 - window;
        if start % 256 == 0 {
            // re-anchor so running-sum drift stays bounded on long series
            sum = values[start..=i].iter().sum();
        } else {
            sum += values[i] - values[i - window];
        }
        out.push(sum / w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunsTest {
    pub n_runs: usize,
    /// Count of values above the median.
    pub n_above: usize,
    /// Count of values below the median.
    pub n_below: usize,
    pub z: f64,
    /// Two-sided normal-approximation p-value.
    pub p_value: f64,
}

impl RunsTest {
    /// Below 20 points the normal approximation is rough.
    pub fn approximation_reliable(&self) -> bool {
        self.n_above + self.n_below >= 20
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wald-Wolfowitz runs test about the median; values equal to the median are
/// dropped before counting runs.
pub fn runs_test(values: &[f64]) -> Result<RunsTest> {
    if values.len() < 2 {
        return Err(PrepError::DegenerateSeries(format!("{} value(s)", values.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(PrepError::NonFinite(i));
    }
    let m = median(values);
    let signs: Vec<bool> = values.iter().filter(|&&v| v != m).map(|&v| v > m).collect();
    let n1 = signs.iter().filter(|&&s| s).count();
    let n2 = signs.len() - n1;
    if n1 == 0 || n2 == 0 {
        return Err(PrepError::DegenerateSeries("all values on one side of the median".into()));
    }
    let n_runs = 1 + signs.windows(2).filter(|w| w[0] != w[1]).count();
    let (a, b) = (n1 as f64, n2 as f64);
    let n = a + b;
    let mu = 2.0 * a * b / n + 1.0;
    let var = 2.0 * a * b * (2.0 * a * b - n) / (n * n * (n - 1.0));
    if !(var > 0.0) {
        return Err(PrepError::DegenerateSeries("zero run-count variance".into()));
    }
    let z = (n_runs as f64 - mu) / var.sqrt();
    let p_value = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(RunsTest { n_runs, n_above: n1, n_below: n2, z, p_value })
}

/// Affine map to `[0, 1]` fitted on one slice and applied to others.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: f64,
    pub max: f64,
    /// Set when the fitted data was constant; the scaler then passes values
    /// through unchanged.
    pub identity: bool,
}

impl MinMaxScaler {
    pub fn fit(values: &[f64]) -> Self {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if values.is_empty() || !(max > min) {
            return Self { min: 0.0, max: 1.0, identity: true };
        }
        Self { min, max, identity: false }
    }

    fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn scale(&self, x: f64) -> f64 {
        if self.identity {
            x
        } else {
            (x - self.min) / self.range()
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if self.identity {
            y
        } else {
            y * self.range() + self.min
        }
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.scale(v)).collect()
    }

    pub fn inverse_transform(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.inverse(v)).collect()
    }
}

/// Fit a scaler on `values` and return the scaled copy.
pub fn minmax_scale(values: &[f64]) -> (Vec<f64>, MinMaxScaler) {
    let s = MinMaxScaler::fit(values);
    (s.transform(values), s)
}

pub fn inverse_scale(scaled: &[f64], scaler: &MinMaxScaler) -> Vec<f64> {
    scaler.inverse_transform(scaled)
}

/// Lookback windows with next-step targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    /// One window per row, `lookback` columns.
    pub inputs: Array2<f64>,
    pub targets: Vec<f64>,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Windows over the whole series: `inputs[i] = values[i..i+w]`,
/// `targets[i] = values[i+w]`.
pub fn make_windows(values: &[f64], lookback: usize) -> Result<Windows> {
    if lookback == 0 {
        return Err(PrepError::BadWindow);
    }
    if values.len() < lookback + 1 {
        return Err(PrepError::SeriesTooShort { needed: lookback + 1, have: values.len() });
    }
    windows_for_targets(values, lookback, lookback..values.len())
}

/// Windows whose targets are `values[targets]`; inputs are the `lookback`
/// values preceding each target, which may reach before `targets.start`.
pub fn windows_for_targets(values: &[f64], lookback: usize, targets: Range<usize>) -> Result<Windows> {
    if lookback == 0 {
        return Err(PrepError::BadWindow);
    }
    if targets.start < lookback || targets.end > values.len() || targets.start > targets.end {
        return Err(PrepError::SeriesTooShort { needed: targets.end.max(lookback + 1), have: values.len() });
    }
    let count = targets.len();
    let mut inputs = Array2::zeros((count, lookback));
    for (row, t) in targets.clone().enumerate() {
        inputs
            .row_mut(row)
            .iter_mut()
            .zip(&values[t - lookback..t])
            .for_each(|(d, s)| *d = *s);
    }
    Ok(Windows { inputs, targets: values[targets].to_vec() })
}

//! Two-stage residual learning.
//!
//! A base forecaster is trained per segment; a fully connected network then
//! learns its training residuals shifted by `Res_B = |min(Res)|` so that every
//! residual target is non-negative and peaks become the largest targets. The
//! combined forecast adds both outputs and removes the shift again.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError, MetricsResult};
use crate::models::{Checkpoint, Forecaster, ModelError, ModelKind, Predictor, PredictorConfig};
use crate::prep::{self, MinMaxScaler, PrepError, SegmentedSeries, SplitSpec, Windows};

pub const BUNDLE_FORMAT: &str = "xrcast-reslearn";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ResLearnError {
    #[error("length mismatch: {targets} targets vs {predictions} predictions")]
    LengthMismatch { targets: usize, predictions: usize },
    #[error("empty residual input")]
    Empty,
    #[error("prep: {0}")]
    Prep(#[from] PrepError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("bundle rejected: {0}")]
    Bundle(String),
}

pub type Result<T> = std::result::Result<T, ResLearnError>;

/// Training residuals, their bias and the shifted residual targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub res: Vec<f64>,
    pub res_b: f64,
    pub residual_train: Vec<f64>,
}

pub fn residual_targets(train_targets: &[f64], base_predictions: &[f64]) -> Result<Residuals> {
    if train_targets.len() != base_predictions.len() {
        return Err(ResLearnError::LengthMismatch {
            targets: train_targets.len(),
            predictions: base_predictions.len(),
        });
    }
    if train_targets.is_empty() {
        return Err(ResLearnError::Empty);
    }
    let res: Vec<f64> = train_targets.iter().zip(base_predictions).map(|(t, p)| t - p).collect();
    let res_b = res.iter().copied().fold(f64::INFINITY, f64::min).abs();
    let residual_train = res.iter().map(|r| r + res_b).collect();
    Ok(Residuals { res, res_b, residual_train })
}

/// Base plus residual forecaster over a train-fitted scaler.
#[derive(Debug, Clone)]
pub struct ResLearnModel<B = Predictor, R = Predictor> {
    pub base: B,
    pub residual: R,
    /// Residual bias in scaled units.
    pub res_b: f64,
    pub scaler: MinMaxScaler,
    /// Add the residual output without removing `res_b`.
    pub paper_literal_combine: bool,
}

impl<B: Forecaster, R: Forecaster> ResLearnModel<B, R> {
    fn check(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if self.base.lookback() != self.residual.lookback() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("residual lookback {}", self.base.lookback()),
                got: format!("{}", self.residual.lookback()),
            }
            .into());
        }
        if inputs.ncols() != self.base.lookback() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("windows of width {}", self.base.lookback()),
                got: format!("width {}", inputs.ncols()),
            }
            .into());
        }
        Ok(())
    }

    /// Combined forecast on already scaled windows, in scaled units.
    pub fn predict_combined_scaled(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check(&inputs)?;
        let base = self.base.predict(inputs)?;
        let residual = self.residual.predict(inputs)?;
        let shift = if self.paper_literal_combine { 0.0 } else { self.res_b };
        Ok(base.iter().zip(&residual).map(|(b, r)| b + r - shift).collect())
    }

    /// Combined forecast on windows in physical units, returned in physical units.
    pub fn predict_combined(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let scaled = self.scale_inputs(inputs);
        Ok(self.scaler.inverse_transform(&self.predict_combined_scaled(scaled.view())?))
    }

    /// Base-only forecast, physical units in and out.
    pub fn predict_base(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check(&inputs)?;
        let scaled = self.scale_inputs(inputs);
        Ok(self.scaler.inverse_transform(&self.base.predict(scaled.view())?))
    }

    fn scale_inputs(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        inputs.mapv(|v| self.scaler.scale(v))
    }
}

#[derive(Serialize, Deserialize)]
struct Bundle {
    format: String,
    version: u32,
    res_b: f64,
    paper_literal_combine: bool,
    scaler: MinMaxScaler,
    base: Checkpoint,
    residual: Checkpoint,
}

impl ResLearnModel<Predictor, Predictor> {
    pub fn save_json(&self) -> String {
        let bundle = Bundle {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            res_b: self.res_b,
            paper_literal_combine: self.paper_literal_combine,
            scaler: self.scaler,
            base: self.base.to_checkpoint(),
            residual: self.residual.to_checkpoint(),
        };
        serde_json::to_string(&bundle).expect("bundle serializes")
    }

    pub fn load_json(text: &str) -> Result<Self> {
        let b: Bundle = serde_json::from_str(text).map_err(|e| ResLearnError::Bundle(format!("parse error: {e}")))?;
        if b.format != BUNDLE_FORMAT || b.version != BUNDLE_VERSION {
            return Err(ResLearnError::Bundle(format!("unsupported {} v{}", b.format, b.version)));
        }
        let base = Predictor::from_checkpoint(b.base)?;
        let residual = Predictor::from_checkpoint(b.residual)?;
        if residual.kind() != ModelKind::Fcnn || residual.config().lookback != base.config().lookback {
            return Err(ResLearnError::Bundle("residual must be an fcnn with the base lookback".into()));
        }
        Ok(Self { base, residual, res_b: b.res_b, scaler: b.scaler, paper_literal_combine: b.paper_literal_combine })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResLearnOptions {
    pub split: SplitSpec,
    pub paper_literal_combine: bool,
    /// Train the residual stage; when off only the base model is evaluated.
    pub residual: bool,
    /// Train segments on the current rayon pool instead of sequentially.
    pub parallel: bool,
}

impl Default for ResLearnOptions {
    fn default() -> Self {
        Self { split: SplitSpec::default(), paper_literal_combine: false, residual: true, parallel: false }
    }
}

/// Actual values and both forecasts over one evaluation range, physical units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageResult {
    pub actual: Vec<f64>,
    pub base: Vec<f64>,
    pub base_metrics: MetricsResult,
    /// Absent when the residual stage was not trained.
    pub combined: Option<Vec<f64>>,
    pub combined_metrics: Option<MetricsResult>,
}

impl StageResult {
    pub fn new(actual: Vec<f64>, base: Vec<f64>, combined: Option<Vec<f64>>) -> Result<Self> {
        let base_metrics = metrics::evaluate(&actual, &base)?;
        let combined_metrics = combined.as_deref().map(|c| metrics::evaluate(&actual, c)).transpose()?;
        Ok(Self { actual, base, base_metrics, combined, combined_metrics })
    }

    /// Mean absolute error on the top-decile actual values, base then
    /// combined.
    pub fn peak_mae(&self) -> Result<(f64, Option<f64>)> {
        Ok((
            metrics::top_decile_mae(&self.actual, &self.base)?,
            self.combined.as_deref().map(|c| metrics::top_decile_mae(&self.actual, c)).transpose()?,
        ))
    }
}

/// Residual-stage facts for one segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualInfo {
    pub res_b: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainedSegment {
    /// Epochs the base model ran before stopping.
    pub base_epochs: usize,
    pub residual: Option<ResidualInfo>,
    pub val: StageResult,
    pub test: StageResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentOutcome {
    Trained(TrainedSegment),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentReport {
    pub segment_index: usize,
    pub base_kind: ModelKind,
    pub outcome: SegmentOutcome,
}

impl SegmentReport {
    pub fn trained(&self) -> Option<&TrainedSegment> {
        match &self.outcome {
            SegmentOutcome::Trained(t) => Some(t),
            SegmentOutcome::Failed(_) => None,
        }
    }
}

pub struct ResLearnRun {
    /// One entry per segment; `None` where training failed.
    pub models: Vec<Option<ResLearnModel>>,
    pub reports: Vec<SegmentReport>,
}

/// Seed for one (segment, stage) pair, independent of scheduling order.
pub fn derive_seed(seed: u64, segment: usize, stage: u64) -> u64 {
    let mut z = seed ^ (segment as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train base and residual models on every segment and evaluate them on the
/// validation and test parts. A failing segment is reported and skipped.
pub fn train_reslearn(
    segments: &SegmentedSeries,
    base_cfg: &PredictorConfig,
    residual_cfg: &PredictorConfig,
    opts: &ResLearnOptions,
) -> ResLearnRun {
    let job = |(i, s): (usize, &prep::TimeSeries)| run_segment(&s.values, i, base_cfg, residual_cfg, opts);
    let results: Vec<_> = if opts.parallel {
        segments.segments.par_iter().enumerate().map(job).collect()
    } else {
        segments.segments.iter().enumerate().map(job).collect()
    };
    let (models, reports) = results.into_iter().unzip();
    ResLearnRun { models, reports }
}

/// [`train_segment`] with failures turned into a flagged report.
pub fn run_segment(
    values: &[f64],
    segment_index: usize,
    base_cfg: &PredictorConfig,
    residual_cfg: &PredictorConfig,
    opts: &ResLearnOptions,
) -> (Option<ResLearnModel>, SegmentReport) {
    let report = |outcome| SegmentReport { segment_index, base_kind: base_cfg.kind, outcome };
    match train_segment(values, segment_index, base_cfg, residual_cfg, opts) {
        Ok((model, seg)) => (model, report(SegmentOutcome::Trained(seg))),
        Err(e) => {
            log::warn!("segment {segment_index} ({}): {e}", base_cfg.kind);
            (None, report(SegmentOutcome::Failed(e.to_string())))
        }
    }
}

/// The per-segment body of [`train_reslearn`]. The model is `None` when the
/// residual stage is switched off.
pub fn train_segment(
    values: &[f64],
    segment_index: usize,
    base_cfg: &PredictorConfig,
    residual_cfg: &PredictorConfig,
    opts: &ResLearnOptions,
) -> Result<(Option<ResLearnModel>, TrainedSegment)> {
    let w = base_cfg.lookback;
    let ranges = prep::split(values.len(), &opts.split, w)?;
    let scaler = MinMaxScaler::fit(&values[ranges.train.clone()]);
    let scaled = scaler.transform(values);
    let train = prep::windows_for_targets(&scaled, w, w..ranges.train.end)?;
    let val = prep::windows_for_targets(&scaled, w, ranges.val.clone())?;
    let test = prep::windows_for_targets(&scaled, w, ranges.test.clone())?;

    let mut base = Predictor::new(PredictorConfig {
        seed: derive_seed(base_cfg.seed, segment_index, 0),
        ..base_cfg.clone()
    })?;
    let base_trace = base.fit(&train, Some(&val))?;

    let base_only = |win: &Windows, range: std::ops::Range<usize>| -> Result<StageResult> {
        let base = scaler.inverse_transform(&base.predict(win.inputs.view())?);
        StageResult::new(values[range].to_vec(), base, None)
    };
    if !opts.residual {
        let seg = TrainedSegment {
            base_epochs: base_trace.epochs_run(),
            residual: None,
            val: base_only(&val, ranges.val.clone())?,
            test: base_only(&test, ranges.test.clone())?,
        };
        return Ok((None, seg));
    }

    let t_pr = base.predict(train.inputs.view())?;
    let residuals = residual_targets(&train.targets, &t_pr)?;
    let val_base = base.predict(val.inputs.view())?;
    let val_residual = Windows {
        inputs: val.inputs.clone(),
        targets: val.targets.iter().zip(&val_base).map(|(t, p)| t - p + residuals.res_b).collect(),
    };
    let mut residual = Predictor::new(PredictorConfig {
        kind: ModelKind::Fcnn,
        lookback: w,
        seed: derive_seed(residual_cfg.seed, segment_index, 1),
        ..residual_cfg.clone()
    })?;
    let residual_trace = residual.fit(
        &Windows { inputs: train.inputs.clone(), targets: residuals.residual_train },
        Some(&val_residual),
    )?;

    let model = ResLearnModel {
        base,
        residual,
        res_b: residuals.res_b,
        scaler,
        paper_literal_combine: opts.paper_literal_combine,
    };
    let stage = |win: &Windows, range: std::ops::Range<usize>| -> Result<StageResult> {
        let base = scaler.inverse_transform(&model.base.predict(win.inputs.view())?);
        let combined = scaler.inverse_transform(&model.predict_combined_scaled(win.inputs.view())?);
        StageResult::new(values[range].to_vec(), base, Some(combined))
    };
    let seg = TrainedSegment {
        base_epochs: base_trace.epochs_run(),
        residual: Some(ResidualInfo { res_b: residuals.res_b, epochs: residual_trace.epochs_run() }),
        val: stage(&val, ranges.val.clone())?,
        test: stage(&test, ranges.test.clone())?,
    };
    Ok((Some(model), seg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_target_examples() {
        let r = residual_targets(&[0.0, 1.0, 3.0], &[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.res, vec![-2.0, 1.0, 3.0]);
        assert_eq!(r.res_b, 2.0);
        assert_eq!(r.residual_train, vec![0.0, 3.0, 5.0]);

        let r = residual_targets(&[1.5, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.res_b, 0.5);
        assert_eq!(r.residual_train, vec![1.0, 1.5]);

        let r = residual_targets(&[4.0, 4.0], &[4.0, 4.0]).unwrap();
        assert_eq!(r.res_b, 0.0);
        assert_eq!(r.residual_train, vec![0.0, 0.0]);

        assert!(matches!(residual_targets(&[1.0], &[1.0, 2.0]), Err(ResLearnError::LengthMismatch { .. })));
    }

    #[test]
    fn seeds_differ_per_segment_and_stage() {
        let a = derive_seed(7, 0, 0);
        assert_ne!(a, derive_seed(7, 1, 0));
        assert_ne!(a, derive_seed(7, 0, 1));
        assert_eq!(a, derive_seed(7, 0, 0));
    }
}

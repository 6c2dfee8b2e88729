//! Report rendering: per-segment metric tables, the model comparison table
//! and actual/predicted plot data.
//!
//! Every float is rounded to 6 significant digits before rendering, so the
//! CSV and JSON outputs carry the same numbers. Metrics are stored in
//! canonical form (MAPE as a fraction, SMAPE in `[0, 2]`); only the
//! comparison table scales them by 100, and says so in its column names.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{self, MetricsResult};
use crate::models::ModelKind;
use crate::reslearn::{SegmentOutcome, SegmentReport, StageResult};

pub const SEGMENT_CSV_HEADER: &str = "segment,model,stage,rmse,mape,smape,res_b,epochs";
pub const MISSING: &str = "NA";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no segment reports to emit")]
    Empty,
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    PlotData,
}

/// `x` rounded to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.5e}").parse().expect("round trip of formatted float")
}

/// Text form of [`sig6`] without exponent notation.
pub fn fmt_sig6(x: f64) -> String {
    format!("{}", sig6(x))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| MISSING.to_string(), fmt_sig6)
}

/// Display name of a model row: the base kind, or `kind+reslearn`.
pub fn model_label(kind: ModelKind, reslearn: bool) -> String {
    if reslearn {
        format!("{kind}+reslearn")
    } else {
        kind.to_string()
    }
}

/// One line of the per-segment table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub segment: usize,
    pub model: String,
    pub stage: String,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub res_b: Option<f64>,
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn metric_row(
    segment: usize,
    model: String,
    stage: &str,
    m: &MetricsResult,
    res_b: Option<f64>,
    epochs: usize,
) -> ReportRow {
    ReportRow {
        segment,
        model,
        stage: stage.into(),
        rmse: Some(sig6(m.rmse)),
        mape: m.mape.map(sig6),
        smape: m.smape.map(sig6),
        res_b: res_b.map(sig6),
        epochs: Some(epochs),
        error: None,
    }
}

/// Flatten reports into table rows, ordered by segment and then by the
/// order the reports arrive in. Base rows carry the base epochs; reslearn
/// rows carry `res_b` and the residual learner's epochs.
pub fn rows(reports: &[SegmentReport]) -> Vec<ReportRow> {
    let mut ordered: Vec<&SegmentReport> = reports.iter().collect();
    ordered.sort_by_key(|r| r.segment_index);
    let mut out = Vec::new();
    for r in ordered {
        let (i, base, rl) = (r.segment_index, model_label(r.base_kind, false), model_label(r.base_kind, true));
        match &r.outcome {
            SegmentOutcome::Trained(t) => {
                for (stage, s) in [("val", &t.val), ("test", &t.test)] {
                    out.push(metric_row(i, base.clone(), stage, &s.base_metrics, None, t.base_epochs));
                    if let (Some(m), Some(info)) = (&s.combined_metrics, t.residual) {
                        out.push(metric_row(i, rl.clone(), stage, m, Some(info.res_b), info.epochs));
                    }
                }
            }
            SegmentOutcome::Failed(msg) => {
                for model in [base, rl] {
                    out.push(ReportRow {
                        segment: i,
                        model,
                        stage: "failed".into(),
                        rmse: None,
                        mape: None,
                        smape: None,
                        res_b: None,
                        epochs: None,
                        error: Some(msg.clone()),
                    });
                }
            }
        }
    }
    out
}

pub fn render_csv(reports: &[SegmentReport]) -> String {
    let mut s = String::from(SEGMENT_CSV_HEADER);
    s.push('\n');
    for r in rows(reports) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.segment,
            r.model,
            r.stage,
            fmt_opt(r.rmse),
            fmt_opt(r.mape),
            fmt_opt(r.smape),
            fmt_opt(r.res_b),
            r.epochs.map_or_else(|| MISSING.to_string(), |e| e.to_string()),
        );
    }
    s
}

pub fn render_json(reports: &[SegmentReport]) -> String {
    let mut s = serde_json::to_string_pretty(&rows(reports)).expect("rows serialize");
    s.push('\n');
    s
}

fn plot_csv(actual: &[f64], predicted: &[f64]) -> String {
    let mut s = String::from("actual,predicted\n");
    for (a, p) in actual.iter().zip(predicted) {
        let _ = writeln!(s, "{},{}", fmt_sig6(*a), fmt_sig6(*p));
    }
    s
}

/// Plot data as `(relative path, contents)` pairs, one two-column file per
/// segment, model and stage.
pub fn plot_files(reports: &[SegmentReport]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for r in reports {
        let Some(t) = r.trained() else { continue };
        for (stage, s) in [("val", &t.val), ("test", &t.test)] {
            out.push((
                format!("plot/seg{}_{}_{stage}.csv", r.segment_index, r.base_kind),
                plot_csv(&s.actual, &s.base),
            ));
            if let Some(c) = &s.combined {
                out.push((
                    format!("plot/seg{}_{}_reslearn_{stage}.csv", r.segment_index, r.base_kind),
                    plot_csv(&s.actual, c),
                ));
            }
        }
    }
    out.sort();
    out
}

/// One model row of the comparison table: metrics averaged over the
/// segments that trained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    pub segments: usize,
    pub failed: usize,
    pub val_rmse: Option<f64>,
    pub val_mape: Option<f64>,
    pub val_smape: Option<f64>,
    pub test_rmse: Option<f64>,
    pub test_mape: Option<f64>,
    pub test_smape: Option<f64>,
    /// Reslearn rows only: percent val SMAPE improvement over the base row.
    pub smape_improvement: Option<f64>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| match x {
        Some(x) => (s + x, n + 1),
        None => (s, n),
    });
    (n > 0).then(|| s / n as f64)
}

/// Rows in first-appearance order of the base kinds, base before reslearn.
pub fn comparison(reports: &[SegmentReport]) -> Vec<ComparisonRow> {
    let mut kinds: Vec<ModelKind> = Vec::new();
    for r in reports {
        if !kinds.contains(&r.base_kind) {
            kinds.push(r.base_kind);
        }
    }
    let mut out = Vec::new();
    for kind in kinds {
        let of_kind: Vec<&SegmentReport> = reports.iter().filter(|r| r.base_kind == kind).collect();
        let trained: Vec<_> = of_kind.iter().filter_map(|r| r.trained()).collect();
        let failed = of_kind.len() - trained.len();
        let row = |reslearn: bool| {
            let pick = |s: &StageResult| if reslearn { s.combined_metrics } else { Some(s.base_metrics) };
            let avg = |f: &dyn Fn(&MetricsResult) -> Option<f64>, val: bool| {
                mean(trained.iter().map(|t| pick(if val { &t.val } else { &t.test }).as_ref().and_then(f)))
            };
            ComparisonRow {
                model: model_label(kind, reslearn),
                segments: trained.len(),
                failed,
                val_rmse: avg(&|m| Some(m.rmse), true),
                val_mape: avg(&|m| m.mape, true),
                val_smape: avg(&|m| m.smape, true),
                test_rmse: avg(&|m| Some(m.rmse), false),
                test_mape: avg(&|m| m.mape, false),
                test_smape: avg(&|m| m.smape, false),
                smape_improvement: None,
            }
        };
        let base = row(false);
        let has_residual = trained.iter().any(|t| t.residual.is_some());
        out.push(base.clone());
        if has_residual || trained.is_empty() {
            let mut rl = row(true);
            if let (Some(b), Some(r)) = (base.val_smape, rl.val_smape) {
                rl.smape_improvement = metrics::smape_improvement(b, r).ok();
            }
            out.push(rl);
        }
    }
    out
}

const COMPARISON_COLUMNS: [&str; 10] = [
    "model",
    "segments",
    "failed",
    "val_rmse",
    "val_mape_x100",
    "val_smape_x100",
    "test_rmse",
    "test_mape_x100",
    "test_smape_x100",
    "smape_improvement_pct",
];

fn comparison_cells(r: &ComparisonRow) -> Vec<String> {
    let pct = |x: Option<f64>| fmt_opt(x.map(|v| v * 100.0));
    vec![
        r.model.clone(),
        r.segments.to_string(),
        r.failed.to_string(),
        fmt_opt(r.val_rmse),
        pct(r.val_mape),
        pct(r.val_smape),
        fmt_opt(r.test_rmse),
        pct(r.test_mape),
        pct(r.test_smape),
        fmt_opt(r.smape_improvement),
    ]
}

/// Comparison table as CSV. MAPE and SMAPE columns are displayed ×100.
pub fn render_comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = COMPARISON_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&comparison_cells(r).join(","));
        s.push('\n');
    }
    s
}

pub fn render_comparison_md(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", COMPARISON_COLUMNS.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(COMPARISON_COLUMNS.len()));
    for r in rows {
        let _ = writeln!(s, "| {} |", comparison_cells(r).join(" | "));
    }
    s.push_str("\nMAPE and SMAPE columns are the canonical fractions multiplied by 100. ");
    s.push_str("Improvement compares mean validation SMAPE of each reslearn row with its base row.\n");
    s
}

fn write(dir: &Path, rel: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ReportError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(&path, contents).map_err(|source| ReportError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Write one rendering of `reports` under `dir` and return the paths written.
pub fn emit_report(reports: &[SegmentReport], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    match format {
        ReportFormat::Csv => Ok(vec![write(dir, "segments.csv", &render_csv(reports))?]),
        ReportFormat::Json => Ok(vec![write(dir, "segments.json", &render_json(reports))?]),
        ReportFormat::PlotData => plot_files(reports).iter().map(|(rel, c)| write(dir, rel, c)).collect(),
    }
}

/// Write both comparison renderings under `dir`.
pub fn emit_comparison(reports: &[SegmentReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    let rows = comparison(reports);
    Ok(vec![
        write(dir, "comparison.csv", &render_comparison_csv(&rows))?,
        write(dir, "comparison.md", &render_comparison_md(&rows))?,
    ])
}

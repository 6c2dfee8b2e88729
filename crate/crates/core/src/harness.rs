//! End-to-end experiment runner and the building blocks behind each CLI
//! subcommand.
//!
//! A run writes into one output directory:
//!
//! - `run.log`: created first, so a failed run leaves only the log behind
//! - `thresholds.json`, `features.csv`: trace inputs only
//! - `eda.json`
//! - `segments.csv`, `segments.json`, `plot/*.csv`
//! - `comparison.csv`, `comparison.md`
//!
//! Nothing in the outputs depends on the worker count or on timing.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, InputSource};
use crate::ingest::{self, EndpointFilter, PacketRecord};
use crate::models::ModelKind;
use crate::prep::{self, Feature, RunsTest, TimeSeries};
use crate::report::{self, ReportFormat};
use crate::reslearn::{self, ResLearnOptions, SegmentReport};
use crate::synth;
use crate::viewframe::{self, VfConfig, VfOutput};

/// Environment variable naming the default output directory of `run`.
pub const OUT_DIR_ENV: &str = "XRCAST_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "xrcast-out";
pub const SERIES_CSV_HEADER: &str = "value";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Process exit status: 1 config, 2 data or I/O, 3 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) | HarnessError::Io { .. } => 2,
            HarnessError::Training(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn data(module: &str, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(format!("{module}: {e}"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunOverrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
    }
}

/// Output directory: config value, then the environment, then a default.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

struct RunLog {
    file: File,
    path: PathBuf,
}

impl RunLog {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join("run.log");
        let file = File::create(&path).map_err(io(&path))?;
        Ok(Self { file, path })
    }

    fn line(&mut self, msg: impl AsRef<str>) -> Result<()> {
        log::info!("{}", msg.as_ref());
        writeln!(self.file, "{}", msg.as_ref()).map_err(io(&self.path))
    }
}

/// Summary statistics and runs tests of a feature series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdaReport {
    pub feature: Feature,
    pub length: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub rolling_window: usize,
    /// Runs test on the raw series; `None` when degenerate.
    pub runs_raw: Option<RunsTest>,
    /// Runs test on the rolling mean.
    pub runs_smoothed: Option<RunsTest>,
}

impl EdaReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("eda report serializes");
        s.push('\n');
        s
    }
}

pub fn eda(series: &TimeSeries, rolling_window: usize) -> Result<EdaReport> {
    let v = &series.values;
    if v.is_empty() {
        return Err(HarnessError::Data("eda: empty series".into()));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let smoothed = prep::rolling_mean(v, rolling_window).map_err(|e| data("prep", e))?;
    Ok(EdaReport {
        feature: series.feature,
        length: v.len(),
        mean,
        std,
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rolling_window,
        runs_raw: prep::runs_test(v).ok(),
        runs_smoothed: prep::runs_test(&smoothed).ok(),
    })
}

/// Read packets from a pcap (by extension `.pcap`/`.cap`) or a packet CSV.
pub fn read_packets(path: &Path, filter: Option<&EndpointFilter>) -> Result<Vec<PacketRecord>> {
    let is_pcap = matches!(path.extension().and_then(|e| e.to_str()), Some("pcap" | "cap"));
    if is_pcap {
        let filter = filter.ok_or_else(|| HarnessError::Data("ingest: pcap input needs a server address".into()))?;
        let trace = ingest::read_pcap_file(path, filter).map_err(|e| data("ingest", e))?;
        if let Some(i) = trace.truncated_at_record {
            log::warn!("{}: truncated at record {i}", path.display());
        }
        Ok(trace.packets)
    } else {
        let f = File::open(path).map_err(|e| data("ingest", format!("{}: {e}", path.display())))?;
        ingest::parse_csv(f).map_err(|e| data("ingest", e))
    }
}

pub fn read_series_csv(path: &Path, feature: Feature) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data("prep", format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| data("prep", e))?.clone();
    if header.len() != 1 || &header[0] != SERIES_CSV_HEADER {
        return Err(data("prep", format!("series csv header must be `{SERIES_CSV_HEADER}`")));
    }
    let mut values = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| data("prep", e))?;
        let v: f64 = row[0].parse().map_err(|_| data("prep", format!("line {}: bad value `{}`", i + 2, &row[0])))?;
        values.push(v);
    }
    TimeSeries::new(values, feature).map_err(|e| data("prep", e))
}

pub fn render_series_csv(values: &[f64]) -> String {
    let mut s = format!("{SERIES_CSV_HEADER}\n");
    for v in values {
        s.push_str(&format!("{v}\n"));
    }
    s
}

/// Frame identification plus the selected feature series.
pub fn frames_to_series(packets: &[PacketRecord], vf: &VfConfig, feature: Feature) -> Result<(VfOutput, TimeSeries)> {
    let out = viewframe::extract(packets, vf).map_err(|e| data("viewframe", e))?;
    let series = TimeSeries::from_features(&out.features, feature).map_err(|e| data("prep", e))?;
    Ok((out, series))
}

/// Load the configured input as a feature series; trace inputs also return
/// the frame identification output.
pub fn load_series(cfg: &ExperimentConfig) -> Result<(TimeSeries, Option<VfOutput>)> {
    let vf = cfg.vf_config();
    let from_packets = |packets: Vec<PacketRecord>| {
        frames_to_series(&packets, &vf, cfg.feature).map(|(out, s)| (s, Some(out)))
    };
    match cfg.input()? {
        InputSource::Pcap { path, filter } => from_packets(read_packets(&path, Some(&filter))?),
        InputSource::TraceCsv(path) => from_packets(read_packets(&path, None)?),
        InputSource::SyntheticTrace(spec) => {
            from_packets(synth::gen_trace(&spec).map_err(|e| data("synth", e))?.packets)
        }
        InputSource::FeaturesCsv(path) => {
            let f = File::open(&path).map_err(|e| data("viewframe", format!("{}: {e}", path.display())))?;
            let features = viewframe::parse_features_csv(f).map_err(|e| data("viewframe", e))?;
            let s = TimeSeries::from_features(&features, cfg.feature).map_err(|e| data("prep", e))?;
            Ok((s, None))
        }
        InputSource::SeriesCsv(path) => Ok((read_series_csv(&path, cfg.feature)?, None)),
        InputSource::SyntheticSeries(spec) => {
            let (s, _) = synth::gen_series(&spec, cfg.feature).map_err(|e| data("synth", e))?;
            Ok((s, None))
        }
    }
}

fn describe(input: &InputSource) -> String {
    match input {
        InputSource::Pcap { path, filter } => format!("pcap {} (server {})", path.display(), filter.server_address),
        InputSource::TraceCsv(p) => format!("packet csv {}", p.display()),
        InputSource::FeaturesCsv(p) => format!("features csv {}", p.display()),
        InputSource::SeriesCsv(p) => format!("series csv {}", p.display()),
        InputSource::SyntheticSeries(s) => format!("synthetic series (length {}, seed {})", s.length, s.seed),
        InputSource::SyntheticTrace(t) => format!("synthetic trace ({} fps, {} s, seed {})", t.fps, t.duration, t.seed),
    }
}

/// Train and evaluate every (model, segment) pair on a bounded worker pool.
/// Reports come back ordered by model list position, then segment.
pub fn train_matrix(cfg: &ExperimentConfig, segments: &prep::SegmentedSeries) -> Result<Vec<SegmentReport>> {
    let jobs: Vec<(ModelKind, usize)> = cfg
        .models
        .iter()
        .flat_map(|k| (0..segments.count()).map(move |i| (*k, i)))
        .collect();
    let residual_cfg = cfg.residual_config();
    let run = |&(kind, i): &(ModelKind, usize)| {
        let opts = ResLearnOptions {
            split: cfg.split(),
            paper_literal_combine: cfg.paper_literal_combine,
            residual: cfg.has_residual(kind),
            parallel: false,
        };
        reslearn::run_segment(&segments.segments[i].values, i, &cfg.base_config(kind), &residual_cfg, &opts).1
    };
    if cfg.jobs <= 1 {
        return Ok(jobs.iter().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| HarnessError::Training(format!("worker pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(run).collect()))
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub reports: Vec<SegmentReport>,
}

fn write_file(dir: &Path, rel: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(rel);
    fs::write(&path, contents).map_err(io(&path))?;
    files.push(path);
    Ok(())
}

/// Run the full pipeline for a validated config. Every report file is
/// written only after all inputs were loaded; `run.log` is the only file a
/// failing run leaves behind. A run where every segment failed to train
/// still writes its reports and then returns a training error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out_dir = output_dir(cfg);
    let mut log = RunLog::create(&out_dir)?;
    let mut files = vec![log.path.clone()];
    let fail = |log: &mut RunLog, e: HarnessError| -> HarnessError {
        let _ = log.line(format!("error: {e}"));
        e
    };

    if let Err(e) = cfg.check_paths() {
        return Err(fail(&mut log, e.into()));
    }
    let input = cfg.input()?;
    log.line(format!("input: {}", describe(&input)))?;
    log.line(format!("feature: {}", cfg.feature))?;
    log.line(format!("seed: {}", cfg.seed))?;

    let (series, vf) = match load_series(cfg) {
        Ok(x) => x,
        Err(e) => return Err(fail(&mut log, e)),
    };
    if let Some(vf) = &vf {
        log.line(format!(
            "thresholds: len_th {} dur_th {} ({} frames, {} segments)",
            report::fmt_sig6(vf.report.len_th),
            report::fmt_sig6(vf.report.dur_th),
            vf.frames.len(),
            vf.features.len()
        ))?;
    }
    let eda_report = match eda(&series, cfg.rolling_window) {
        Ok(r) => r,
        Err(e) => return Err(fail(&mut log, e)),
    };
    let segments = match prep::segment(&series, cfg.segment_size) {
        Ok(s) => s,
        Err(e) => return Err(fail(&mut log, data("prep", e))),
    };
    log.line(format!(
        "series: {} points, {} segments of {} ({} dropped)",
        series.len(),
        segments.count(),
        segments.segment_size,
        segments.dropped
    ))?;

    let reports = train_matrix(cfg, &segments)?;
    for r in &reports {
        match &r.outcome {
            reslearn::SegmentOutcome::Trained(t) => log.line(format!(
                "segment {} {}: base {} epochs{}",
                r.segment_index,
                r.base_kind,
                t.base_epochs,
                t.residual.map_or(String::new(), |i| format!(", residual {} epochs", i.epochs))
            ))?,
            reslearn::SegmentOutcome::Failed(msg) => {
                log.line(format!("segment {} {}: FAILED: {msg}", r.segment_index, r.base_kind))?
            }
        }
    }

    if let Some(vf) = &vf {
        write_file(&out_dir, "thresholds.json", &vf.report.to_json(), &mut files)?;
        write_file(&out_dir, "features.csv", &viewframe::emit_features_csv(&vf.features), &mut files)?;
    }
    write_file(&out_dir, "eda.json", &eda_report.to_json(), &mut files)?;
    let report_err = |e: report::ReportError| HarnessError::Data(format!("report: {e}"));
    for format in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotData] {
        files.extend(report::emit_report(&reports, format, &out_dir).map_err(report_err)?);
    }
    files.extend(report::emit_comparison(&reports, &out_dir).map_err(report_err)?);
    log.line(format!("wrote {} files", files.len()))?;

    let failed = reports.iter().filter(|r| r.trained().is_none()).count();
    if failed == reports.len() {
        return Err(fail(&mut log, HarnessError::Training(format!("all {failed} segment jobs failed"))));
    }
    Ok(RunSummary { out_dir, files, reports })
}

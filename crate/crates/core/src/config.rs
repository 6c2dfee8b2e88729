//! Experiment configuration: a flat TOML document with typed keys.
//!
//! Unknown keys are rejected. The synthetic generators take their parameters
//! from `series.*` / `trace.*` keys. Relative input paths are resolved
//! against the directory of the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Direction, EndpointFilter};
use crate::models::{ModelKind, PredictorConfig};
use crate::prep::{Feature, SplitSpec, DEFAULT_LOOKBACK, DEFAULT_ROLLING_WINDOW, DEFAULT_SEGMENT_SIZE, MIN_SEGMENT_SIZE};
use crate::synth::{SeriesSpec, TraceSpec};
use crate::viewframe::{FrameOptions, VfConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Series,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSet {
    Down,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub pcap: Option<PathBuf>,
    /// Packet trace in `ts,length,direction` form.
    pub trace_csv: Option<PathBuf>,
    /// Output of the `frames` step: `segment,f_c,f_s,f_iat`.
    pub features_csv: Option<PathBuf>,
    /// A single `value` column.
    pub series_csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticKind>,

    pub server_address: Option<String>,
    pub server_port: Option<u32>,

    pub segment_duration: f64,
    pub vf_bins: usize,
    pub fallback_dur_th: f64,
    pub directions: DirectionSet,
    pub min_frame_packets: usize,
    pub split_on_small_packet: bool,

    pub feature: Feature,
    pub segment_size: usize,
    pub lookback: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub rolling_window: usize,

    pub models: Vec<ModelKind>,
    /// Models that also get a residual stage; defaults to all of `models`.
    pub reslearn: Option<Vec<ModelKind>>,
    pub paper_literal_combine: bool,

    pub epochs: usize,
    pub hidden_width: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,

    pub residual_epochs: usize,
    pub residual_hidden_width: usize,
    pub residual_learning_rate: f64,

    pub seed: u64,
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,

    pub series: SeriesSpec,
    pub trace: TraceSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PredictorConfig::new(ModelKind::Transformer);
        let vf = VfConfig::default();
        let split = SplitSpec::default();
        Self {
            pcap: None,
            trace_csv: None,
            features_csv: None,
            series_csv: None,
            synthetic: None,
            server_address: None,
            server_port: None,
            segment_duration: vf.segment_duration,
            vf_bins: vf.bins,
            fallback_dur_th: vf.fallback_dur_th,
            directions: DirectionSet::Down,
            min_frame_packets: 1,
            split_on_small_packet: false,
            feature: Feature::Size,
            segment_size: DEFAULT_SEGMENT_SIZE,
            lookback: DEFAULT_LOOKBACK,
            train_ratio: split.train_ratio,
            val_ratio: split.val_ratio,
            rolling_window: DEFAULT_ROLLING_WINDOW,
            models: ModelKind::BASES.to_vec(),
            reslearn: None,
            paper_literal_combine: false,
            epochs: p.epochs,
            hidden_width: p.hidden_width,
            d_model: p.d_model,
            n_heads: p.n_heads,
            n_layers: p.n_layers,
            ffn_width: p.ffn_width,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            early_stop_patience: p.early_stop_patience,
            early_stop_min_delta: p.early_stop_min_delta,
            residual_epochs: p.epochs,
            residual_hidden_width: p.hidden_width,
            residual_learning_rate: p.learning_rate,
            seed: 0,
            jobs: 1,
            out_dir: None,
            series: SeriesSpec::default(),
            trace: TraceSpec::default(),
        }
    }
}

/// The single data source an experiment reads.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    Pcap { path: PathBuf, filter: EndpointFilter },
    TraceCsv(PathBuf),
    FeaturesCsv(PathBuf),
    SeriesCsv(PathBuf),
    SyntheticSeries(SeriesSpec),
    SyntheticTrace(TraceSpec),
}

impl InputSource {
    /// Whether the input goes through frame identification.
    pub fn is_trace(&self) -> bool {
        matches!(self, InputSource::Pcap { .. } | InputSource::TraceCsv(_) | InputSource::SyntheticTrace(_))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Read, parse and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.pcap, &mut self.trace_csv, &mut self.features_csv, &mut self.series_csv]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [
            self.pcap.is_some(),
            self.trace_csv.is_some(),
            self.features_csv.is_some(),
            self.series_csv.is_some(),
            self.synthetic.is_some(),
        ];
        match sources.iter().filter(|s| **s).count() {
            1 => {}
            0 => return invalid("no input: set one of pcap, trace_csv, features_csv, series_csv, synthetic"),
            n => return invalid(format!("{n} inputs given; exactly one of pcap, trace_csv, features_csv, series_csv, synthetic is allowed")),
        }
        if self.pcap.is_some() && self.server_address.is_none() {
            return invalid("pcap input needs server_address");
        }
        if self.segment_size < MIN_SEGMENT_SIZE {
            return invalid(format!("segment_size must be at least {MIN_SEGMENT_SIZE}"));
        }
        if !(self.segment_duration > 0.0) {
            return invalid("segment_duration must be positive");
        }
        if self.vf_bins == 0 || self.rolling_window == 0 || self.jobs == 0 {
            return invalid("vf_bins, rolling_window and jobs must be at least 1");
        }
        if !(self.fallback_dur_th > 0.0) {
            return invalid("fallback_dur_th must be positive");
        }
        self.split().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.models.is_empty() {
            return invalid("models must list at least one base kind");
        }
        let mut seen = BTreeSet::new();
        for k in &self.models {
            if *k == ModelKind::Fcnn {
                return invalid("fcnn is the residual learner, not a base model");
            }
            if !seen.insert(*k) {
                return invalid(format!("model `{k}` listed twice"));
            }
        }
        if let Some(rl) = &self.reslearn {
            if let Some(k) = rl.iter().find(|k| !seen.contains(*k)) {
                return invalid(format!("reslearn lists `{k}`, which is not in models"));
            }
        }
        for k in &self.models {
            self.base_config(*k).validate().map_err(|e| ConfigError::Invalid(format!("{k}: {e}")))?;
        }
        self.residual_config().validate().map_err(|e| ConfigError::Invalid(format!("residual: {e}")))?;
        match self.synthetic {
            Some(SyntheticKind::Series) => self.series.validate(),
            Some(SyntheticKind::Trace) => self.trace.validate(),
            None => Ok(()),
        }
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.input()?;
        Ok(())
    }

    /// Check that file inputs exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.pcap, &self.trace_csv, &self.features_csv, &self.series_csv].into_iter().flatten() {
            if !p.is_file() {
                return invalid(format!("input file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn input(&self) -> Result<InputSource> {
        if let Some(path) = &self.pcap {
            let addr = self.server_address.as_deref().unwrap_or_default();
            let filter = EndpointFilter::new(addr, self.server_port).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            return Ok(InputSource::Pcap { path: path.clone(), filter });
        }
        if let Some(p) = &self.trace_csv {
            return Ok(InputSource::TraceCsv(p.clone()));
        }
        if let Some(p) = &self.features_csv {
            return Ok(InputSource::FeaturesCsv(p.clone()));
        }
        if let Some(p) = &self.series_csv {
            return Ok(InputSource::SeriesCsv(p.clone()));
        }
        match self.synthetic {
            Some(SyntheticKind::Series) => Ok(InputSource::SyntheticSeries(self.series.clone())),
            Some(SyntheticKind::Trace) => Ok(InputSource::SyntheticTrace(self.trace.clone())),
            None => invalid("no input source"),
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec { train_ratio: self.train_ratio, val_ratio: self.val_ratio }
    }

    pub fn vf_config(&self) -> VfConfig {
        let directions = match self.directions {
            DirectionSet::Down => FrameOptions::downlink_only().directions,
            DirectionSet::Both => [Direction::Downlink, Direction::Uplink].into_iter().collect(),
        };
        VfConfig {
            segment_duration: self.segment_duration,
            bins: self.vf_bins,
            fallback_dur_th: self.fallback_dur_th,
            frames: FrameOptions {
                min_packets: self.min_frame_packets,
                split_on_small_packet: self.split_on_small_packet,
                directions,
            },
        }
    }

    pub fn base_config(&self, kind: ModelKind) -> PredictorConfig {
        PredictorConfig {
            kind,
            lookback: self.lookback,
            epochs: self.epochs,
            hidden_width: self.hidden_width,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ffn_width: self.ffn_width,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            early_stop_patience: self.early_stop_patience,
            early_stop_min_delta: self.early_stop_min_delta,
            seed: self.seed,
        }
    }

    pub fn residual_config(&self) -> PredictorConfig {
        PredictorConfig {
            epochs: self.residual_epochs,
            hidden_width: self.residual_hidden_width,
            learning_rate: self.residual_learning_rate,
            ..self.base_config(ModelKind::Fcnn)
        }
    }

    pub fn has_residual(&self, kind: ModelKind) -> bool {
        self.reslearn.as_ref().is_none_or(|r| r.contains(&kind))
    }
}

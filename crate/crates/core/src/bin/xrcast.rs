use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use xrcast::config::{ConfigError, ExperimentConfig};
use xrcast::harness::{self, HarnessError, Result, RunOverrides};
use xrcast::ingest::{self, EndpointFilter};
use xrcast::metrics::{self, MetricsResult};
use xrcast::models::ModelKind;
use xrcast::prep::{self, Feature};
use xrcast::reslearn::{self, ResLearnModel, ResLearnOptions};
use xrcast::synth::{self, PcapEndpoints, SeriesSpec, TraceSpec};
use xrcast::viewframe::{self, FrameOptions, VfConfig};

#[derive(Parser)]
#[command(name = "xrcast", version, about = "XR frame traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a pcap or packet CSV into `ts,length,direction` CSV.
    Ingest {
        input: PathBuf,
        /// Server IPv4 address; packets from it are downlink (pcap only).
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        port: Option<u32>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Identify frames and write thresholds.json and features.csv.
    Frames {
        input: PathBuf,
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        port: Option<u32>,
        #[arg(long, default_value_t = 1.0)]
        segment_duration: f64,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Count uplink packets towards frames as well.
        #[arg(long)]
        both_directions: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary statistics and runs tests of the configured input series.
    Eda {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train base and residual models on one segment and save the bundle.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: ModelKind,
        #[arg(long, default_value_t = 0)]
        segment: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Bundle JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved bundle on one segment's validation and test parts.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 0)]
        segment: usize,
    },
    /// Generate a synthetic packet trace or feature series.
    Synth {
        what: SynthKind,
        /// TOML file with generator parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output path; traces ending in `.pcap` are written as pcap.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: input, frames, EDA, model matrix, reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for segment/model jobs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory (default: $XRCAST_OUT_DIR, then ./xrcast-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Trace,
    Series,
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(ConfigError::Invalid(msg.into()))
}

fn write_out(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io { path: path.into(), source })
}

fn filter(server: Option<&str>, port: Option<u32>) -> Result<Option<EndpointFilter>> {
    server.map(|s| EndpointFilter::new(s, port).map_err(|e| config_err(e.to_string()))).transpose()
}

fn load_spec<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|source| HarnessError::Config(ConfigError::Read { path: path.into(), source }))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config(ConfigError::Parse(e.to_string())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct StageEval {
    base: MetricsResult,
    combined: MetricsResult,
}

#[derive(Serialize)]
struct Evaluation {
    segment: usize,
    model: ModelKind,
    val: StageEval,
    test: StageEval,
}

fn segment_values(cfg: &ExperimentConfig, segment: usize) -> Result<Vec<f64>> {
    let (series, _) = harness::load_series(cfg)?;
    let segs = prep::segment(&series, cfg.segment_size).map_err(|e| HarnessError::Data(format!("prep: {e}")))?;
    segs.segments
        .get(segment)
        .map(|s| s.values.clone())
        .ok_or_else(|| config_err(format!("segment {segment} out of range (have {})", segs.count())))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { input, server, port, out } => {
            let f = filter(server.as_deref(), port)?;
            let csv = ingest::emit_csv(&harness::read_packets(&input, f.as_ref())?);
            match out {
                Some(p) => write_out(&p, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Frames { input, server, port, segment_duration, bins, both_directions, out } => {
            let f = filter(server.as_deref(), port)?;
            let packets = harness::read_packets(&input, f.as_ref())?;
            let vf = VfConfig {
                segment_duration,
                bins,
                frames: if both_directions { FrameOptions::both_directions() } else { FrameOptions::downlink_only() },
                ..VfConfig::default()
            };
            let result = viewframe::extract(&packets, &vf).map_err(|e| HarnessError::Data(format!("viewframe: {e}")))?;
            std::fs::create_dir_all(&out).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
            write_out(&out.join("thresholds.json"), result.report.to_json().as_bytes())?;
            write_out(&out.join("features.csv"), viewframe::emit_features_csv(&result.features).as_bytes())?;
            println!("{} frames in {} segments", result.frames.len(), result.features.len());
            Ok(())
        }
        Command::Eda { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (series, _) = harness::load_series(&cfg)?;
            print!("{}", harness::eda(&series, cfg.rolling_window)?.to_json());
            Ok(())
        }
        Command::Train { config, model, segment, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let values = segment_values(&cfg, segment)?;
            let opts = ResLearnOptions {
                split: cfg.split(),
                paper_literal_combine: cfg.paper_literal_combine,
                ..ResLearnOptions::default()
            };
            let (bundle, seg) =
                reslearn::train_segment(&values, segment, &cfg.base_config(model), &cfg.residual_config(), &opts)
                    .map_err(|e| HarnessError::Training(e.to_string()))?;
            let bundle = bundle.expect("residual stage enabled");
            write_out(&out, bundle.save_json().as_bytes())?;
            println!("{}", xrcast::report::render_csv(&[reslearn::SegmentReport {
                segment_index: segment,
                base_kind: model,
                outcome: reslearn::SegmentOutcome::Trained(seg),
            }]));
            Ok(())
        }
        Command::Evaluate { config, bundle, segment } => {
            let cfg = ExperimentConfig::load(&config)?;
            let text = std::fs::read_to_string(&bundle).map_err(|source| HarnessError::Io { path: bundle.clone(), source })?;
            let model = ResLearnModel::load_json(&text).map_err(|e| HarnessError::Data(e.to_string()))?;
            let values = segment_values(&cfg, segment)?;
            let w = model.base.config().lookback;
            let ranges = prep::split(values.len(), &cfg.split(), w).map_err(|e| HarnessError::Data(format!("prep: {e}")))?;
            let stage = |range: std::ops::Range<usize>| -> Result<StageEval> {
                let win = prep::windows_for_targets(&values, w, range).map_err(|e| HarnessError::Data(e.to_string()))?;
                let base = model.predict_base(win.inputs.view()).map_err(|e| HarnessError::Data(e.to_string()))?;
                let comb = model.predict_combined(win.inputs.view()).map_err(|e| HarnessError::Data(e.to_string()))?;
                let m = |p: &[f64]| metrics::evaluate(&win.targets, p).map_err(|e| HarnessError::Data(e.to_string()));
                Ok(StageEval { base: m(&base)?, combined: m(&comb)? })
            };
            let eval = Evaluation { segment, model: model.base.kind(), val: stage(ranges.val)?, test: stage(ranges.test)? };
            print!("{}", to_json(&eval));
            Ok(())
        }
        Command::Synth { what, spec, seed, out } => match what {
            SynthKind::Trace => {
                let mut s: TraceSpec = load_spec(spec.as_deref())?;
                if let Some(seed) = seed {
                    s.seed = seed;
                }
                let trace = synth::gen_trace(&s).map_err(|e| config_err(e.to_string()))?;
                if out.extension().is_some_and(|e| e == "pcap") {
                    let bytes = synth::write_pcap(&trace.packets, &PcapEndpoints::default())
                        .map_err(|e| config_err(e.to_string()))?;
                    write_out(&out, &bytes)
                } else {
                    write_out(&out, ingest::emit_csv(&trace.packets).as_bytes())
                }
            }
            SynthKind::Series => {
                let mut s: SeriesSpec = load_spec(spec.as_deref())?;
                if let Some(seed) = seed {
                    s.seed = seed;
                }
                let (series, _) = synth::gen_series(&s, Feature::Size).map_err(|e| config_err(e.to_string()))?;
                write_out(&out, harness::render_series_csv(&series.values).as_bytes())
            }
        },
        Command::Run { config, seed, jobs, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            RunOverrides { seed, jobs, out }.apply(&mut cfg);
            let summary = harness::run_experiment(&cfg)?;
            println!("wrote {} files to {}", summary.files.len(), summary.out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xrcast: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

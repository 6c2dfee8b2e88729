//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use proptest::test_runner::{Config as PropConfig, TestRunner};
use xrcast::config::ExperimentConfig;
use xrcast::harness;
use xrcast::metrics::{mape, rmse, smape, smape_improvement};
use xrcast::models::{self, Forecaster, ModelKind, Predictor, PredictorConfig};
use xrcast::prep::{self, Feature, MinMaxScaler};
use xrcast::reslearn::{residual_targets, ResLearnModel, SegmentOutcome};
use xrcast::synth::{gen_series, gen_trace, SeriesSpec, TraceSpec};
use xrcast::viewframe::{extract, VfConfig};

type Outcome = Result<String, String>;

fn fixture_cfg() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fixture.cfg")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

struct MetricCase {
    actual: &'static [f64],
    predicted: &'static [f64],
    rmse: f64,
    mape: f64,
    smape: f64,
}

fn metric_cases() -> Vec<MetricCase> {
    vec![
        MetricCase { actual: &[1.0, 2.0, 3.0], predicted: &[1.0, 2.0, 3.0], rmse: 0.0, mape: 0.0, smape: 0.0 },
        MetricCase {
            actual: &[1.0, 2.0, 3.0, 4.0],
            predicted: &[2.0, 2.0, 2.0, 2.0],
            rmse: 1.5f64.sqrt(),
            mape: (1.0 + 0.0 + 1.0 / 3.0 + 0.5) / 4.0,
            smape: (2.0 / 3.0 + 0.0 + 0.4 + 2.0 / 3.0) / 4.0,
        },
        MetricCase { actual: &[10.0], predicted: &[12.0], rmse: 2.0, mape: 0.2, smape: 2.0 / 11.0 },
        MetricCase { actual: &[-2.0, 4.0], predicted: &[2.0, 4.0], rmse: 8f64.sqrt(), mape: 1.0, smape: 1.0 },
        MetricCase { actual: &[0.0, 5.0], predicted: &[1.0, 5.0], rmse: 0.5f64.sqrt(), mape: 0.0, smape: 1.0 },
        MetricCase {
            actual: &[100.0, 200.0, 300.0],
            predicted: &[110.0, 190.0, 330.0],
            rmse: (1100.0f64 / 3.0).sqrt(),
            mape: 0.25 / 3.0,
            smape: (10.0 / 105.0 + 10.0 / 195.0 + 30.0 / 315.0) / 3.0,
        },
        MetricCase { actual: &[1.0, 1.0, 1.0, 1.0], predicted: &[0.0; 4], rmse: 1.0, mape: 1.0, smape: 2.0 },
        MetricCase { actual: &[3.0, -3.0], predicted: &[-3.0, 3.0], rmse: 6.0, mape: 2.0, smape: 2.0 },
        MetricCase {
            actual: &[0.5, 1.5, 2.5],
            predicted: &[1.0, 1.0, 1.0],
            rmse: (2.75f64 / 3.0).sqrt(),
            mape: (1.0 + 1.0 / 3.0 + 0.6) / 3.0,
            smape: (0.5 / 0.75 + 0.5 / 1.25 + 1.5 / 1.75) / 3.0,
        },
        MetricCase {
            actual: &[1e6, 2e6],
            predicted: &[1.1e6, 1.8e6],
            rmse: 2.5e10f64.sqrt(),
            mape: 0.1,
            smape: (0.1 / 1.05 + 0.2 / 1.9) / 2.0,
        },
        MetricCase {
            actual: &[2.0, 4.0, 6.0, 8.0, 10.0],
            predicted: &[1.0, 5.0, 5.0, 9.0, 9.0],
            rmse: 1.0,
            mape: (0.5 + 0.25 + 1.0 / 6.0 + 0.125 + 0.1) / 5.0,
            smape: (1.0 / 1.5 + 1.0 / 4.5 + 1.0 / 5.5 + 1.0 / 8.5 + 1.0 / 9.5) / 5.0,
        },
    ]
}

fn criterion_1() -> Outcome {
    let cases = metric_cases();
    for (i, c) in cases.iter().enumerate() {
        let got = (
            rmse(c.actual, c.predicted).map_err(|e| e.to_string())?,
            mape(c.actual, c.predicted).map_err(|e| e.to_string())?.value,
            smape(c.actual, c.predicted).map_err(|e| e.to_string())?.value,
        );
        // relative for the large-magnitude case
        let tol = 1e-9 * c.rmse.abs().max(1.0);
        if !(close(got.0, c.rmse, tol) && close(got.1, c.mape, 1e-9) && close(got.2, c.smape, 1e-9)) {
            return Err(format!("fixture {i}: got {got:?}, want ({}, {}, {})", c.rmse, c.mape, c.smape));
        }
    }
    let mut runner = TestRunner::new(PropConfig { cases: 10_000, failure_persistence: None, ..PropConfig::default() });
    let strategy = proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..64);
    runner
        .run(&strategy, |pairs| {
            let (a, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(x), Ok(y)) = (smape(&a, &p), smape(&p, &a)) {
                proptest::prop_assert_eq!(x.value, y.value);
                proptest::prop_assert!((0.0..=2.0).contains(&x.value));
            }
            Ok(())
        })
        .map_err(|e| format!("property: {e}"))?;
    Ok(format!("{} fixtures to 1e-9, 10000 random SMAPE symmetry/bound cases", cases.len()))
}

fn criterion_2() -> Outcome {
    let table: [(f64, f64, f64, f64); 5] = [
        (404.05, 0.36, 99.91, 0.0),
        (285.29, 1.01, 99.65, 0.02),
        (371.82, 0.15, 99.96, 0.02),
        (562.87, 0.45, 99.92, 0.0),
        (404.41, 0.69, 99.83, 0.02),
    ];
    let mut shown = Vec::new();
    for (base, rl, want, tol) in table {
        let got = smape_improvement(base, rl).map_err(|e| e.to_string())?;
        let rounded = (got * 100.0).round() / 100.0;
        if !close(rounded, want, tol + 1e-9) {
            return Err(format!("({base}, {rl}) gives {got:.4}%, want {want}±{tol}"));
        }
        shown.push(format!("{rounded:.2}"));
    }
    let t1 = smape_improvement(0.78, 0.24).map_err(|e| e.to_string())?;
    if !close(t1, 68.87, 1.0) {
        return Err(format!("(0.78, 0.24) gives {t1:.2}%, want 68.87±1.0"));
    }
    Ok(format!("[{}]%, rounded-input case {t1:.2}% vs 68.87%", shown.join(", ")))
}

fn worst_gradient_error(kind: ModelKind) -> Result<f64, String> {
    const EPS: f64 = 1e-4;
    let cfg = PredictorConfig {
        lookback: 6,
        hidden_width: 5,
        d_model: 6,
        n_heads: 2,
        n_layers: 2,
        ffn_width: 8,
        seed: 21,
        ..PredictorConfig::new(kind)
    };
    let model = Predictor::new(cfg).map_err(|e| e.to_string())?;
    let x = Array2::from_shape_fn((4, 6), |(i, j)| 0.5 + 0.4 * ((i * 6 + j) as f64 * 0.61).cos());
    let t = [0.7, 0.1, 0.45, 0.9];
    let (_, grad) = model.loss_and_gradient(x.view(), &t).map_err(|e| e.to_string())?;
    let mut p = model.params().to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + EPS;
        let up = model.loss_at(&p, x.view(), &t).map_err(|e| e.to_string())?;
        p[i] = orig - EPS;
        let down = model.loss_at(&p, x.view(), &t).map_err(|e| e.to_string())?;
        p[i] = orig;
        let num = (up - down) / (2.0 * EPS);
        worst = worst.max((grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-6));
    }
    Ok(worst)
}

fn criterion_3() -> Outcome {
    let mut shown = Vec::new();
    let mut ok = true;
    for kind in ModelKind::ALL {
        let worst = worst_gradient_error(kind)?;
        ok &= worst < 1e-3;
        shown.push(format!("{kind} {worst:.1e}"));
    }
    let msg = format!("worst relative error: {}", shown.join(", "));
    if ok { Ok(msg) } else { Err(msg) }
}

struct Canned(Vec<f64>);

impl Forecaster for Canned {
    fn lookback(&self) -> usize {
        8
    }

    fn predict(&self, _: ArrayView2<f64>) -> models::Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

fn criterion_4() -> Outcome {
    let spec = SeriesSpec { length: 160, spike_period: 12, spike_height: 30.0, seed: 4, ..Default::default() };
    let values = gen_series(&spec, Feature::Size).map_err(|e| e.to_string())?.0.values;
    let scaler = MinMaxScaler::fit(&values);
    let scaled = prep::make_windows(&scaler.transform(&values), 8).map_err(|e| e.to_string())?;
    let physical = prep::make_windows(&values, 8).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for kind in ModelKind::BASES {
        let cfg = PredictorConfig { lookback: 8, hidden_width: 8, d_model: 8, n_heads: 2, ffn_width: 16, epochs: 3, ..PredictorConfig::new(kind) };
        let mut base = Predictor::new(cfg).map_err(|e| e.to_string())?;
        base.fit(&scaled, None).map_err(|e| e.to_string())?;
        let t_pr = base.predict(scaled.inputs.view()).map_err(|e| e.to_string())?;
        let r = residual_targets(&scaled.targets, &t_pr).map_err(|e| e.to_string())?;
        let model = ResLearnModel { base, residual: Canned(r.residual_train), res_b: r.res_b, scaler, paper_literal_combine: false };
        let out = model.predict_combined(physical.inputs.view()).map_err(|e| e.to_string())?;
        let err = out.iter().zip(&physical.targets).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err > 1e-9 {
            return Err(format!("{kind}: max abs error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("all base kinds, max abs error {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let spec = TraceSpec::default();
    let trace = gen_trace(&spec).map_err(|e| e.to_string())?;
    let out = extract(&trace.packets, &VfConfig::default()).map_err(|e| e.to_string())?;
    let dur_th = out.report.dur_th;
    if spec.intra_spacing > dur_th / 3.0 || 1.0 / spec.fps - 7.0 * spec.intra_spacing < 3.0 * dur_th {
        return Err(format!("fixture outside gap preconditions (dur_th {dur_th})"));
    }
    let planted: u64 = trace.frames.iter().map(|f| f.size).sum();
    let got: u64 = out.frames.iter().map(|f| f.size).sum();
    if out.frames.len() != trace.frames.len() || got != planted {
        return Err(format!("{} frames / {got} B recovered, {} / {planted} planted", out.frames.len(), trace.frames.len()));
    }
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let spec = TraceSpec { jitter_std: 0.2 / spec.fps, seed, ..Default::default() };
        let trace = gen_trace(&spec).map_err(|e| e.to_string())?;
        let out = extract(&trace.packets, &VfConfig::default()).map_err(|e| e.to_string())?;
        let n = trace.frames.len() as f64;
        worst = worst.max((out.frames.len() as f64 - n).abs() / n);
    }
    if worst > 0.01 {
        return Err(format!("jittered frame-count error {:.2}%", 100.0 * worst));
    }
    Ok(format!("{} frames and {planted} B exact; jittered count error {:.2}% (5 seeds)", trace.frames.len(), 100.0 * worst))
}

fn criterion_6() -> Outcome {
    let mut cfg = ExperimentConfig::load(&fixture_cfg()).map_err(|e| e.to_string())?;
    cfg.models = vec![ModelKind::Transformer];
    let (series, _) = harness::load_series(&cfg).map_err(|e| e.to_string())?;
    let segments = prep::segment(&series, cfg.segment_size).map_err(|e| e.to_string())?;
    let reports = harness::train_matrix(&cfg, &segments).map_err(|e| e.to_string())?;
    let (mut base_smape, mut comb_smape, mut base_peak, mut comb_peak) = (0.0, 0.0, 0.0, 0.0);
    let mut peak_wins = 0;
    for r in &reports {
        let SegmentOutcome::Trained(t) = &r.outcome else {
            return Err(format!("segment {} failed", r.segment_index));
        };
        let combined = t.val.combined_metrics.ok_or("no residual stage")?;
        base_smape += t.val.base_metrics.smape.ok_or("undefined SMAPE")?;
        comb_smape += combined.smape.ok_or("undefined SMAPE")?;
        let (b, c) = t.val.peak_mae().map_err(|e| e.to_string())?;
        let c = c.ok_or("no combined predictions")?;
        base_peak += b;
        comb_peak += c;
        peak_wins += usize::from(c < b);
    }
    let n = reports.len() as f64;
    let improvement = smape_improvement(base_smape / n, comb_smape / n).map_err(|e| e.to_string())?;
    let msg = format!(
        "transformer, {} segments: val SMAPE {:.4} -> {:.4} ({improvement:.1}% better); top-decile MAE {:.3} -> {:.3} (lower in {peak_wins}/{})",
        reports.len(),
        base_smape / n,
        comb_smape / n,
        base_peak / n,
        comb_peak / n,
        reports.len()
    );
    if improvement >= 30.0 && comb_peak < base_peak { Ok(msg) } else { Err(msg) }
}

fn criterion_7() -> Outcome {
    let (mut trend_hits, mut noise_hits) = (0, 0);
    for seed in 0..100 {
        let trending = SeriesSpec { length: 1000, amplitude: 0.0, slope: 0.01, noise_std: 1.0, seed, ..Default::default() };
        let noise = SeriesSpec { length: 1000, amplitude: 0.0, noise_std: 1.0, seed: seed + 1000, ..Default::default() };
        let t = harness::eda(&gen_series(&trending, Feature::Size).map_err(|e| e.to_string())?.0, prep::DEFAULT_ROLLING_WINDOW)
            .map_err(|e| e.to_string())?;
        let n = harness::eda(&gen_series(&noise, Feature::Size).map_err(|e| e.to_string())?.0, prep::DEFAULT_ROLLING_WINDOW)
            .map_err(|e| e.to_string())?;
        trend_hits += usize::from(t.runs_smoothed.is_some_and(|r| r.p_value < 0.01));
        noise_hits += usize::from(n.runs_raw.is_some_and(|r| r.p_value > 0.05));
    }
    let msg = format!("smoothed trend p < 0.01 in {trend_hits}/100, noise p > 0.05 in {noise_hits}/100");
    if trend_hits >= 90 && noise_hits >= 90 { Ok(msg) } else { Err(msg) }
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable output dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_fixture(out: &Path, jobs: usize) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_xrcast"))
        .args(["run", "--config"])
        .arg(fixture_cfg())
        .args(["--seed", "7", "--jobs", &jobs.to_string(), "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("run with --jobs {jobs} exited with {}: {}", o.status, String::from_utf8_lossy(&o.stderr)));
    }
    Ok(read_tree(out))
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let first = run_fixture(&tmp.path().join("a"), 1)?;
    let runs = [("second --jobs 1", run_fixture(&tmp.path().join("b"), 1)?), ("--jobs 4", run_fixture(&tmp.path().join("c"), 4)?)];
    for (label, other) in &runs {
        if other.keys().ne(first.keys()) {
            return Err(format!("{label}: different file set"));
        }
        if let Some((path, _)) = first.iter().find(|(p, bytes)| other[*p] != **bytes) {
            return Err(format!("{label}: {} differs", path.display()));
        }
    }
    Ok(format!("{} files byte-identical across 3 runs", first.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracles", criterion_1),
        ("improvement arithmetic", criterion_2),
        ("gradient checks", criterion_3),
        ("two-stage identity", criterion_4),
        ("frame recovery", criterion_5),
        ("peaky fixture", criterion_6),
        ("runs test", criterion_7),
        ("determinism", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {} ({name}): {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

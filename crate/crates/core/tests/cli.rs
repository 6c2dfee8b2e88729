use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
segment_size = 120
lookback = 8
epochs = 5
residual_epochs = 5
hidden_width = 8
d_model = 8
n_heads = 2
ffn_width = 16
"#;

fn xrcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xrcast"))
        .args(args)
        .env_remove("XRCAST_OUT_DIR")
        .output()
        .expect("spawn xrcast")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_cfg(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, format!("{extra}\n{SMALL}")).unwrap();
    path.to_str().unwrap().to_owned()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn usage_error_exits_one() {
    assert_eq!(code(&xrcast(&["run"])), 1);
    assert_eq!(code(&xrcast(&["frobnicate"])), 1);
    assert_eq!(code(&xrcast(&["--help"])), 0);
}

#[test]
fn missing_input_writes_only_run_log() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "series_csv = \"absent.csv\"\nmodels = [\"lstm\"]");
    let out = tmp.path().join("out");
    let o = xrcast(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(listing(&out), ["run.log"]);
    assert!(fs::read_to_string(out.join("run.log")).unwrap().contains("absent.csv"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "synthetic = \"series\"\nlearning_rte = 0.1");
    assert_eq!(code(&xrcast(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()])), 1);
}

#[test]
fn malformed_series_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("s.csv"), "value\n1.0\nabc\n3.0\n").unwrap();
    let cfg = write_cfg(tmp.path(), "series_csv = \"s.csv\"\nmodels = [\"lstm\"]");
    let out = tmp.path().join("out");
    let o = xrcast(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn every_segment_failing_is_a_training_error() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("exp.cfg");
    fs::write(
        &path,
        "synthetic = \"series\"\nmodels = [\"gru\"]\nsegment_size = 40\nlookback = 16\nseries.length = 120\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = xrcast(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("run.log")).unwrap().contains("FAILED"));
}

#[test]
fn reslearn_list_limits_residual_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "synthetic = \"series\"\nmodels = [\"lstm\", \"gru\"]\nreslearn = [\"lstm\"]\nseries.length = 240",
    );
    let out = tmp.path().join("out");
    let o = xrcast(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("segments.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains(",lstm+reslearn,")));
    assert!(!csv.contains("gru+reslearn"));
    assert!(csv.lines().any(|l| l.contains(",gru,val,")));
    for name in ["run.log", "eda.json", "segments.json", "comparison.csv", "comparison.md"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert!(out.join("plot").is_dir());
}

#[test]
fn synth_trace_then_ingest_and_frames() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("trace.toml");
    fs::write(&spec, "duration = 2.0\n").unwrap();
    let pcap = tmp.path().join("t.pcap");
    let o = xrcast(&["synth", "trace", "--spec", spec.to_str().unwrap(), "--seed", "3", "--out", pcap.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = xrcast(&["ingest", pcap.to_str().unwrap(), "--server", "10.0.0.1", "--port", "9000"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("ts,length,direction\n"));
    assert!(text.lines().count() > 144);

    let frames = tmp.path().join("frames");
    let o = xrcast(&[
        "frames",
        pcap.to_str().unwrap(),
        "--server",
        "10.0.0.1",
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("144 frames"));
    assert_eq!(listing(&frames), ["features.csv", "thresholds.json"]);

    assert_eq!(code(&xrcast(&["ingest", tmp.path().join("nope.pcap").to_str().unwrap(), "--server", "10.0.0.1"])), 2);
}

#[test]
fn synth_series_train_and_evaluate() {
    let tmp = TempDir::new().unwrap();
    let series = tmp.path().join("s.csv");
    let spec = tmp.path().join("series.toml");
    fs::write(&spec, "length = 240\n").unwrap();
    let o = xrcast(&["synth", "series", "--spec", spec.to_str().unwrap(), "--out", series.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&series).unwrap().lines().count(), 241);

    let cfg = write_cfg(tmp.path(), "series_csv = \"s.csv\"\nmodels = [\"gru\"]");
    let o = xrcast(&["eda", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    assert!(serde_json::from_slice::<serde_json::Value>(&o.stdout).is_ok());

    let bundle = tmp.path().join("b.json");
    let o = xrcast(&["train", "--config", &cfg, "--model", "gru", "--segment", "1", "--out", bundle.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = xrcast(&["evaluate", "--config", &cfg, "--bundle", bundle.to_str().unwrap(), "--segment", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["model"], "gru");
    assert!(v["val"]["combined"]["rmse"].is_number());

    let o = xrcast(&["evaluate", "--config", &cfg, "--bundle", bundle.to_str().unwrap(), "--segment", "9"]);
    assert_eq!(code(&o), 1);
}

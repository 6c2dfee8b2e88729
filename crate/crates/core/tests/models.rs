use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xrcast::models::{Forecaster, ModelKind, Predictor, PredictorConfig};
use xrcast::prep::{make_windows, Windows};

fn small(kind: ModelKind, lookback: usize) -> PredictorConfig {
    PredictorConfig {
        lookback,
        hidden_width: 16,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        ffn_width: 32,
        seed: 5,
        ..PredictorConfig::new(kind)
    }
}

fn sine(n: usize, period: f64) -> Vec<f64> {
    (0..n).map(|t| 0.5 + 0.4 * (std::f64::consts::TAU * t as f64 / period).sin()).collect()
}

#[test]
fn constant_series_is_learned_by_every_kind() {
    let w = make_windows(&[0.6; 80], 8).unwrap();
    for kind in ModelKind::ALL {
        let cfg = PredictorConfig {
            epochs: 200,
            learning_rate: 1e-2,
            early_stop_patience: 200,
            early_stop_min_delta: 0.0,
            ..small(kind, 8)
        };
        let mut m = Predictor::new(cfg).unwrap();
        m.fit(&w, None).unwrap();
        let mse = m.loss(w.inputs.view(), &w.targets).unwrap();
        assert!(mse < 1e-4, "{kind}: mse {mse}");
    }
}

#[test]
fn transformer_learns_noiseless_sine() {
    let v = sine(300, 20.0);
    let train = xrcast::prep::windows_for_targets(&v, 16, 16..200).unwrap();
    let val = xrcast::prep::windows_for_targets(&v, 16, 200..300).unwrap();
    let cfg = PredictorConfig { epochs: 300, learning_rate: 3e-3, batch_size: 16, ..small(ModelKind::Transformer, 16) };
    let mut m = Predictor::new(cfg).unwrap();
    m.fit(&train, Some(&val)).unwrap();
    let rmse = m.loss(val.inputs.view(), &val.targets).unwrap().sqrt();
    assert!(rmse < 0.05, "val rmse {rmse}");
}

#[test]
fn fcnn_fits_window_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = Array2::from_shape_fn((512, 8), |_| rng.random_range(0.0..1.0));
    let targets: Vec<f64> = inputs.rows().into_iter().map(|r| r.mean().unwrap()).collect();
    let w = Windows { inputs, targets };
    let cfg = PredictorConfig {
        epochs: 400,
        hidden_width: 32,
        learning_rate: 1e-3,
        early_stop_patience: 400,
        early_stop_min_delta: 0.0,
        ..small(ModelKind::Fcnn, 8)
    };
    let mut m = Predictor::new(cfg).unwrap();
    m.fit(&w, None).unwrap();
    let mse = m.loss(w.inputs.view(), &w.targets).unwrap();
    assert!(mse < 1e-5, "mse {mse}");
}

#[test]
fn identical_windows_give_identical_finite_outputs() {
    let x = Array2::from_shape_fn((4, 8), |(_, j)| j as f64 / 8.0);
    for kind in ModelKind::ALL {
        let m = Predictor::new(small(kind, 8)).unwrap();
        let y = m.predict(x.view()).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(y.iter().all(|v| *v == y[0]), "{kind}");
    }
}

#[test]
fn fit_is_deterministic() {
    let v = sine(120, 15.0);
    let w = make_windows(&v, 8).unwrap();
    for kind in [ModelKind::Transformer, ModelKind::Gru] {
        let cfg = PredictorConfig { epochs: 5, ..small(kind, 8) };
        let mut a = Predictor::new(cfg.clone()).unwrap();
        let mut b = Predictor::new(cfg).unwrap();
        assert_eq!(a.fit(&w, None).unwrap(), b.fit(&w, None).unwrap());
        assert_eq!(a.params(), b.params());
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let m = Predictor::new(PredictorConfig { n_layers: 2, ..small(ModelKind::Transformer, 8) }).unwrap();
    let window: Vec<f64> = sine(8, 5.0);
    let att = m.attention_weights(&window).unwrap();
    assert_eq!(att.len(), 2);
    for layer in &att {
        assert_eq!(layer.len(), 2);
        for head in layer {
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
    assert!(Predictor::new(small(ModelKind::Lstm, 8)).unwrap().attention_weights(&window).is_none());
}

#[test]
fn gate_activations_in_unit_interval() {
    let window: Vec<f64> = (0..8).map(|i| i as f64 * 3.0 - 10.0).collect();
    for kind in [ModelKind::Lstm, ModelKind::Gru, ModelKind::StackedLstm] {
        let m = Predictor::new(small(kind, 8)).unwrap();
        let gates = m.gate_activations(&window).unwrap();
        assert_eq!(gates.len(), 8);
        assert!(gates.iter().flatten().all(|g| *g > 0.0 && *g < 1.0), "{kind}");
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/transformer_predictions.txt")
}

#[test]
fn predictions_match_golden_file() {
    let v = sine(100, 12.0);
    let w = make_windows(&v, 8).unwrap();
    let mut m = Predictor::new(PredictorConfig { epochs: 3, ..small(ModelKind::Transformer, 8) }).unwrap();
    m.fit(&w, None).unwrap();
    let preds = m.predict(w.inputs.slice(ndarray::s![..6, ..])).unwrap();
    let text: String = preds.iter().map(|p| format!("{:016x} {p}\n", p.to_bits())).collect();
    let path = golden_path();
    if std::env::var_os("XRCAST_BLESS").is_some() || !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&path).unwrap());
}

fn epoch_time(kind: ModelKind, lookback: usize) -> Duration {
    let v = sine(64 + lookback, 10.0);
    let w = make_windows(&v, lookback).unwrap();
    let cfg = PredictorConfig { epochs: 1, ..small(kind, lookback) };
    (0..3)
        .map(|_| {
            let mut m = Predictor::new(cfg.clone()).unwrap();
            let t = Instant::now();
            m.fit(&w, None).unwrap();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn epoch_time_grows_with_lookback() {
    for kind in [ModelKind::Transformer, ModelKind::Lstm] {
        let short = epoch_time(kind, 16);
        let long = epoch_time(kind, 64);
        assert!(long > short, "{kind}: W=16 {short:?}, W=64 {long:?}");
    }
}

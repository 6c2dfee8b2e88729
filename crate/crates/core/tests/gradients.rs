//! Analytic gradients against central finite differences.

use ndarray::Array2;
use xrcast::models::{ModelKind, Predictor, PredictorConfig};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn config(kind: ModelKind) -> PredictorConfig {
    PredictorConfig {
        lookback: 5,
        hidden_width: 4,
        d_model: 6,
        n_heads: 2,
        n_layers: 2,
        ffn_width: 7,
        seed: 11,
        ..PredictorConfig::new(kind)
    }
}

fn batch() -> (Array2<f64>, Vec<f64>) {
    let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
    (x, vec![0.3, -0.2, 0.8])
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn check(kind: ModelKind) {
    let model = Predictor::new(config(kind)).unwrap();
    let (x, t) = batch();
    let (_, grad) = model.loss_and_gradient(x.view(), &t).unwrap();
    let mut p = model.params().to_vec();
    let mut worst = (0.0, 0usize);
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + EPS;
        let up = model.loss_at(&p, x.view(), &t).unwrap();
        p[i] = orig - EPS;
        let down = model.loss_at(&p, x.view(), &t).unwrap();
        p[i] = orig;
        let num = (up - down) / (2.0 * EPS);
        let e = rel_err(grad[i], num);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    assert!(worst.0 < TOL, "{kind}: worst relative error {} at parameter {}", worst.0, worst.1);
}

#[test]
fn fcnn_gradient() {
    check(ModelKind::Fcnn);
}

#[test]
fn lstm_gradient() {
    check(ModelKind::Lstm);
}

#[test]
fn gru_gradient() {
    check(ModelKind::Gru);
}

#[test]
fn stacked_lstm_gradient() {
    check(ModelKind::StackedLstm);
}

#[test]
fn transformer_gradient() {
    check(ModelKind::Transformer);
}

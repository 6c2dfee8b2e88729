//! Trainable sequence models behind a single [`Predictor`] type.
//!
//! Five kinds are available: a transformer encoder (the base learner), LSTM,
//! GRU and two-layer stacked LSTM baselines, and the fully connected network
//! used as residual learner. All map a lookback window of `W` scalars to one
//! next-step value and train on mean squared error with Adam.

mod fcnn;
pub mod params;
mod recurrent;
mod transformer;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::Windows;
use fcnn::Fcnn;
use params::{Adam, ParamLayout};
use recurrent::{CellKind, RecurrentNet};
use transformer::Transformer;

pub use transformer::positional_encoding;

pub const CHECKPOINT_FORMAT: &str = "xrcast-predictor";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite at epoch {epoch} (last finite epoch: {last_finite:?})")]
    NonFiniteLoss { epoch: usize, last_finite: Option<usize> },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Lstm,
    Gru,
    StackedLstm,
    Fcnn,
}

impl ModelKind {
    pub const BASES: [ModelKind; 4] = [ModelKind::Transformer, ModelKind::Lstm, ModelKind::Gru, ModelKind::StackedLstm];
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Transformer, ModelKind::Lstm, ModelKind::Gru, ModelKind::StackedLstm, ModelKind::Fcnn];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::StackedLstm => "stacked_lstm",
            ModelKind::Fcnn => "fcnn",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::Lstm | ModelKind::Gru | ModelKind::StackedLstm)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown model kind `{s}`"))
    }
}

/// Hyperparameters of one predictor. Fields a kind does not use are ignored
/// (e.g. `n_heads` for an LSTM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub kind: ModelKind,
    pub lookback: usize,
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
    pub seed: u64,
}

impl PredictorConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            lookback: crate::prep::DEFAULT_LOOKBACK,
            epochs: 300,
            hidden_width: 64,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            ffn_width: 128,
            learning_rate: 1e-3,
            batch_size: 32,
            early_stop_patience: 10,
            early_stop_min_delta: 1e-4,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        for (name, v) in [
            ("lookback", self.lookback),
            ("hidden_width", self.hidden_width),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_width", self.ffn_width),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return bad("early_stop_min_delta must be non-negative".into());
        }
        Ok(())
    }
}

/// Anything that maps lookback windows to one forecast per window.
pub trait Forecaster {
    fn lookback(&self) -> usize;
    fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochLoss>,
    /// Epoch whose parameters were kept (1-based), if any epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

#[derive(Debug, Clone)]
enum Network {
    Transformer(Transformer),
    Recurrent(RecurrentNet),
    Fcnn(Fcnn),
}

impl Network {
    fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Vec<f64> {
        match self {
            Network::Transformer(n) => n.forward(p, x),
            Network::Recurrent(n) => n.forward(p, x),
            Network::Fcnn(n) => n.forward(p, x),
        }
    }

    fn loss_grad(&self, p: &[f64], x: ArrayView2<f64>, t: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Network::Transformer(n) => n.loss_grad(p, x, t, grad),
            Network::Recurrent(n) => n.loss_grad(p, x, t, grad),
            Network::Fcnn(n) => n.loss_grad(p, x, t, grad),
        }
    }
}

/// A trainable model with its parameters.
#[derive(Debug, Clone)]
pub struct Predictor {
    config: PredictorConfig,
    layout: ParamLayout,
    net: Network,
    params: Vec<f64>,
}

impl Predictor {
    /// Build the model named by `config.kind` with freshly seeded weights.
    pub fn new(config: PredictorConfig) -> Result<Self> {
        match config.kind {
            ModelKind::Transformer => Self::build_transformer(config),
            ModelKind::Lstm | ModelKind::Gru | ModelKind::StackedLstm => Self::build_recurrent(config),
            ModelKind::Fcnn => Self::build_fcnn(config),
        }
    }

    pub fn build_transformer(config: PredictorConfig) -> Result<Self> {
        if config.kind != ModelKind::Transformer {
            return Err(ModelError::BadConfig(format!("expected transformer, got {}", config.kind)));
        }
        config.validate()?;
        let mut layout = ParamLayout::default();
        let net = Transformer::new(
            &mut layout,
            config.lookback,
            config.d_model,
            config.n_heads,
            config.n_layers,
            config.ffn_width,
        );
        Ok(Self::assemble(config, layout, Network::Transformer(net)))
    }

    pub fn build_recurrent(config: PredictorConfig) -> Result<Self> {
        let (cell, depth) = match config.kind {
            ModelKind::Lstm => (CellKind::Lstm, 1),
            ModelKind::StackedLstm => (CellKind::Lstm, 2),
            ModelKind::Gru => (CellKind::Gru, 1),
            other => return Err(ModelError::BadConfig(format!("{other} is not a recurrent kind"))),
        };
        config.validate()?;
        let mut layout = ParamLayout::default();
        let net = RecurrentNet::new(&mut layout, cell, config.hidden_width, depth);
        Ok(Self::assemble(config, layout, Network::Recurrent(net)))
    }

    pub fn build_fcnn(config: PredictorConfig) -> Result<Self> {
        if config.kind != ModelKind::Fcnn {
            return Err(ModelError::BadConfig(format!("expected fcnn, got {}", config.kind)));
        }
        config.validate()?;
        let mut layout = ParamLayout::default();
        let net = Fcnn::new(&mut layout, config.lookback, config.hidden_width);
        Ok(Self::assemble(config, layout, Network::Fcnn(net)))
    }

    fn assemble(config: PredictorConfig, layout: ParamLayout, net: Network) -> Self {
        let params = layout.initialize(&mut ChaCha8Rng::seed_from_u64(config.seed));
        Self { config, layout, net, params }
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} parameters", self.params.len()),
                got: format!("{} parameters", params.len()),
            });
        }
        self.params = params;
        Ok(())
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.config.lookback {
            return Err(ModelError::ShapeMismatch {
                expected: format!("windows of width {}", self.config.lookback),
                got: format!("width {}", inputs.ncols()),
            });
        }
        Ok(())
    }

    fn check_targets(&self, inputs: &ArrayView2<f64>, targets: &[f64]) -> Result<()> {
        self.check_inputs(inputs)?;
        if inputs.nrows() != targets.len() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} targets", inputs.nrows()),
                got: format!("{}", targets.len()),
            });
        }
        Ok(())
    }

    /// Mean squared error of the current parameters.
    pub fn loss(&self, inputs: ArrayView2<f64>, targets: &[f64]) -> Result<f64> {
        self.loss_at(&self.params, inputs, targets)
    }

    /// Mean squared error with an explicit parameter vector.
    pub fn loss_at(&self, params: &[f64], inputs: ArrayView2<f64>, targets: &[f64]) -> Result<f64> {
        self.check_targets(&inputs, targets)?;
        if params.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} parameters", self.params.len()),
                got: format!("{}", params.len()),
            });
        }
        let preds = self.net.forward(params, inputs);
        Ok(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / targets.len() as f64)
    }

    /// Mean squared error and its analytic gradient w.r.t. every parameter.
    pub fn loss_and_gradient(&self, inputs: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_targets(&inputs, targets)?;
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.net.loss_grad(&self.params, inputs, targets, &mut grad);
        Ok((loss, grad))
    }

    /// Self-attention weights for one window, `[layer][head]`; `None` for
    /// non-transformer kinds.
    pub fn attention_weights(&self, window: &[f64]) -> Option<Vec<Vec<Array2<f64>>>> {
        match &self.net {
            Network::Transformer(t) if window.len() == self.config.lookback => Some(t.attention(&self.params, window)),
            _ => None,
        }
    }

    /// Sigmoid/tanh gate activations of the first recurrent layer, one vector
    /// per step; `None` for non-recurrent kinds.
    pub fn gate_activations(&self, window: &[f64]) -> Option<Vec<Vec<f64>>> {
        match &self.net {
            Network::Recurrent(r) if window.len() == self.config.lookback => {
                Some(r.first_layer_gates(&self.params, window))
            }
            _ => None,
        }
    }

    /// Mini-batch Adam on MSE with early stopping on the validation loss (or
    /// the training loss when no validation set is given). The parameters of
    /// the best epoch are restored at the end.
    pub fn fit(&mut self, train: &Windows, val: Option<&Windows>) -> Result<TrainTrace> {
        let mut trace = TrainTrace::default();
        if self.config.epochs == 0 {
            return Ok(trace);
        }
        if train.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        self.check_targets(&train.inputs.view(), &train.targets)?;
        if let Some(v) = val {
            self.check_targets(&v.inputs.view(), &v.targets)?;
        }
        let val = val.filter(|v| !v.is_empty());

        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        shuffle_rng.set_stream(1);
        let mut opt = Adam::new(self.params.len(), self.config.learning_rate);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut best = (f64::INFINITY, self.params.clone(), None::<usize>);
        let mut since_best = 0usize;
        let mut batch_x = Array2::<f64>::zeros((0, self.config.lookback));
        let mut batch_t = Vec::with_capacity(self.config.batch_size);

        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut weighted = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                batch_x = train.inputs.select(Axis(0), chunk);
                batch_t.clear();
                batch_t.extend(chunk.iter().map(|&i| train.targets[i]));
                grad.iter_mut().for_each(|g| *g = 0.0);
                let l = self.net.loss_grad(&self.params, batch_x.view(), &batch_t, &mut grad);
                if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    self.params = best.1;
                    return Err(ModelError::NonFiniteLoss { epoch, last_finite: epoch.checked_sub(1).filter(|e| *e > 0) });
                }
                weighted += l * chunk.len() as f64;
                opt.step(&mut self.params, &grad);
            }
            let train_loss = weighted / train.len() as f64;
            let val_loss = match val {
                Some(v) => Some(self.loss(v.inputs.view(), &v.targets)?),
                None => None,
            };
            trace.epochs.push(EpochLoss { epoch, train_loss, val_loss });
            let monitored = val_loss.unwrap_or(train_loss);
            if !monitored.is_finite() {
                self.params = best.1;
                return Err(ModelError::NonFiniteLoss { epoch, last_finite: best.2 });
            }
            if monitored < best.0 - self.config.early_stop_min_delta || best.2.is_none() {
                best = (monitored, self.params.clone(), Some(epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.config.early_stop_patience {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
        drop(batch_x);
        self.params = best.1;
        trace.best_epoch = best.2;
        Ok(trace)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            param_count: self.params.len(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut model = Self::new(ck.config)?;
        if ck.param_count != model.param_count() || ck.params.len() != model.param_count() {
            return Err(ModelError::Checkpoint(format!(
                "config implies {} parameters, checkpoint declares {} and holds {}",
                model.param_count(),
                ck.param_count,
                ck.params.len()
            )));
        }
        model.params = ck.params;
        Ok(model)
    }

    pub fn save_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn load_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(format!("parse error: {e}")))?;
        Self::from_checkpoint(ck)
    }
}

impl Forecaster for Predictor {
    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_inputs(&inputs)?;
        Ok(self.net.forward(&self.params, inputs))
    }
}

/// Serialized predictor: config plus the flat parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: PredictorConfig,
    pub param_count: usize,
    pub params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ModelKind) -> PredictorConfig {
        PredictorConfig {
            lookback: 6,
            hidden_width: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ffn_width: 8,
            ..PredictorConfig::new(kind)
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(ModelKind::Transformer);
        c.n_heads = 3;
        assert!(matches!(Predictor::new(c), Err(ModelError::BadConfig(_))));
        let mut c = small(ModelKind::Fcnn);
        c.learning_rate = 0.0;
        assert!(matches!(Predictor::new(c), Err(ModelError::BadConfig(_))));
        assert!(Predictor::build_fcnn(small(ModelKind::Lstm)).is_err());
        assert!(Predictor::build_recurrent(small(ModelKind::Transformer)).is_err());
        let c = PredictorConfig { d_model: 64, n_heads: 2, ..PredictorConfig::new(ModelKind::Transformer) };
        assert_eq!(c.head_dim(), 32);
    }

    #[test]
    fn kind_round_trips_through_str() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("rnn".parse::<ModelKind>().is_err());
    }

    #[test]
    fn predict_rejects_wrong_width() {
        let m = Predictor::new(small(ModelKind::Gru)).unwrap();
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(m.predict(x.view()), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn stacked_has_more_params() {
        let l = Predictor::new(small(ModelKind::Lstm)).unwrap();
        let s = Predictor::new(small(ModelKind::StackedLstm)).unwrap();
        assert!(s.param_count() > l.param_count());
    }

    #[test]
    fn zero_output_layer_predicts_bias() {
        let mut m = Predictor::new(small(ModelKind::Fcnn)).unwrap();
        let w = m.layout().get("out.w").unwrap();
        let b = m.layout().get("out.b").unwrap();
        m.params_mut()[w.range()].fill(0.0);
        m.params_mut()[b.range()].fill(0.37);
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i * 7 + j) as f64 * 0.1);
        assert!(m.predict(x.view()).unwrap().iter().all(|&y| y == 0.37));
    }

    #[test]
    fn zero_epochs_leaves_params() {
        let mut c = small(ModelKind::Lstm);
        c.epochs = 0;
        let mut m = Predictor::new(c).unwrap();
        let before = m.params().to_vec();
        let w = crate::prep::make_windows(&[0.1; 20], 6).unwrap();
        let trace = m.fit(&w, None).unwrap();
        assert!(trace.epochs.is_empty());
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let m = Predictor::new(small(ModelKind::Transformer)).unwrap();
        let mut ck = m.to_checkpoint();
        ck.version = 99;
        assert!(Predictor::from_checkpoint(ck).is_err());
        let mut ck = m.to_checkpoint();
        ck.params.pop();
        assert!(Predictor::from_checkpoint(ck).is_err());
        let back = Predictor::load_json(&m.save_json()).unwrap();
        assert_eq!(back.params(), m.params());
    }
}

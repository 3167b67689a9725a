//! The two detectors.
//!
//! Both consume `[batch, seg_len, 15]` feature windows (already masked and
//! standardized) and emit one pump probability per segment — the probability
//! that the window's final chunk sits inside a pump. They differ in
//! everything else: [`CLstm`] is a conv/LSTM binary classifier trained on
//! binary cross-entropy; [`AnomalyTransformer`] is an attention model trained
//! with a two-phase minimax objective over its association structure.
//!
//! Model hyperparameters come from the run config, never from checkpoints:
//! a checkpoint stores only named parameter tensors, and loading validates
//! them against the architecture the config describes.

pub mod anomaly_transformer;
pub mod clstm;

pub use anomaly_transformer::{association_discrepancy, AnomTransConfig, AnomalyTransformer, AtOutput};
pub use clstm::{CLstm, CLstmConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Adam, NnError, ParamSet, Tensor};
use crate::seed::substream;

/// Which detector a config or checkpoint refers to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    #[serde(rename = "clstm")]
    CLstm,
    AnomalyTransformer,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::CLstm => "clstm",
            ModelKind::AnomalyTransformer => "anomaly_transformer",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "clstm" => Ok(ModelKind::CLstm),
            "anomaly_transformer" => Ok(ModelKind::AnomalyTransformer),
            other => Err(NnError::InvalidArg(format!(
                "unknown model kind {other:?} (expected \"clstm\" or \"anomaly_transformer\")"
            ))),
        }
    }
}

/// A detector plus its parameters.
#[derive(Clone, Debug)]
pub enum Model {
    CLstm(CLstm),
    AnomalyTransformer(AnomalyTransformer),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::CLstm(_) => ModelKind::CLstm,
            Model::AnomalyTransformer(_) => ModelKind::AnomalyTransformer,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::CLstm(m) => &m.params,
            Model::AnomalyTransformer(m) => &m.params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().param_count()
    }

    /// Replace the parameters with checkpoint contents, validating every
    /// name and shape against the current architecture.
    pub fn set_params(&mut self, params: ParamSet) -> Result<(), NnError> {
        let current = self.params();
        if params.len() != current.len() {
            return Err(NnError::BadCheckpoint(format!(
                "parameter count mismatch: checkpoint has {}, model needs {}",
                params.len(),
                current.len()
            )));
        }
        for (name, tensor) in current.iter() {
            let Some(loaded) = params.get(name) else {
                return Err(NnError::BadCheckpoint(format!("checkpoint is missing {name:?}")));
            };
            if loaded.shape() != tensor.shape() {
                return Err(NnError::BadCheckpoint(format!(
                    "shape mismatch for {name:?}: checkpoint {:?}, model {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
        }
        match self {
            Model::CLstm(m) => m.params = params,
            Model::AnomalyTransformer(m) => m.params = params,
        }
        Ok(())
    }

    /// Probabilities for a `[batch, seg_len, 15]` input, no gradient state.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        match self {
            Model::CLstm(m) => m.predict(x),
            Model::AnomalyTransformer(m) => m.predict(x),
        }
    }

    /// One optimizer update (two for the minimax model). Returns the
    /// training loss — the min-phase loss for the transformer.
    pub fn train_batch(
        &mut self,
        x: &Tensor,
        labels: &[f64],
        opt: &mut Adam,
    ) -> Result<f64, NnError> {
        match self {
            Model::CLstm(m) => m.train_batch(x, labels, opt),
            Model::AnomalyTransformer(m) => Ok(m.train_step(x, labels, opt)?.0),
        }
    }

    /// Optimizer defaults: 1e-3 for the C-LSTM, 1e-4 for the transformer.
    pub fn default_lr(&self) -> f64 {
        self.kind().default_lr()
    }

    /// Decision-threshold defaults: 0.5 for the C-LSTM, 0.48 for the
    /// transformer.
    pub fn default_threshold(&self) -> f64 {
        self.kind().default_threshold()
    }

    /// Epoch budgets the training defaults honor: 200 / 50.
    pub fn default_epochs(&self) -> u32 {
        self.kind().default_epochs()
    }

    /// Default training batch size: 600 segments for the C-LSTM, 32 for the
    /// transformer.
    pub fn default_batch_size(&self) -> usize {
        self.kind().default_batch_size()
    }
}

impl ModelKind {
    /// Optimizer defaults: 1e-3 for the C-LSTM, 1e-4 for the transformer.
    pub fn default_lr(self) -> f64 {
        match self {
            ModelKind::CLstm => 1e-3,
            ModelKind::AnomalyTransformer => 1e-4,
        }
    }

    /// Decision-threshold defaults: 0.5 for the C-LSTM, 0.48 for the
    /// transformer.
    pub fn default_threshold(self) -> f64 {
        match self {
            ModelKind::CLstm => 0.5,
            ModelKind::AnomalyTransformer => 0.48,
        }
    }

    /// Epoch budgets the training defaults honor: 200 / 50.
    pub fn default_epochs(self) -> u32 {
        match self {
            ModelKind::CLstm => 200,
            ModelKind::AnomalyTransformer => 50,
        }
    }

    /// Default training batch size: 600 segments for the C-LSTM, 32 for the
    /// transformer.
    pub fn default_batch_size(self) -> usize {
        match self {
            ModelKind::CLstm => 600,
            ModelKind::AnomalyTransformer => 32,
        }
    }
}

/// Uniform init in `±1/√fan_in`, one named seed substream per tensor so a
/// parameter's draw does not depend on its position in the set.
pub(crate) fn uniform_init(
    seed: u64,
    name: &str,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng: ChaCha8Rng = substream(seed, &format!("init/{name}"));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape consistent")
}

//! Loss, optimizer, training loop, rolling forecast and checkpoints.

mod adam;
mod checkpoint;
mod forecast;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, WindowedDataset};
use crate::model::{ModelError, TSTransformer};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forecast::{rolling_forecast, CovariateMode, ForecastResult};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("parameter {param} became non-finite after an optimizer step")]
    NonFiniteParameter { param: String },
    #[error("non-finite forecast at test row {0}")]
    NonFiniteForecast(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    /// Whether the failure is numerical rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::NonFiniteLoss { .. }
                | Self::NonFiniteGradient { .. }
                | Self::NonFiniteParameter { .. }
                | Self::NonFiniteForecast(_)
        ) || matches!(self, Self::Tensor(TensorError::NonFinite { .. }))
            || matches!(self, Self::Model(ModelError::Tensor(TensorError::NonFinite { .. })))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Stop after this many epochs without a new best mean loss.
    pub patience: Option<usize>,
    /// Stop once an epoch's mean loss is at or below this value.
    pub target_loss: Option<f64>,
    /// Fit every channel's forecast instead of the target channel only.
    pub all_channels_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            patience: None,
            target_loss: None,
            all_channels_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(TrainError::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(TrainError::Config(format!("clip norm must be >= 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_norm: self.clip_norm,
        }
    }
}

/// Mean squared error of a `[B, M, S]` forecast against `[B, S]` targets of
/// channel `target_channel`, or against `[B, M, S]` when `target_channel` is `None`.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, target_channel: Option<usize>) -> Result<Var> {
    let pred = match target_channel {
        Some(c) => tape.select_row(pred, c)?,
        None => pred,
    };
    Ok(tape.mse(pred, target)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss of every completed epoch.
    pub loss_history: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    /// `epoch,mean_loss` with 1-based epochs.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

/// Mini-batch Adam over shuffled windows. The shuffle uses ChaCha8 seeded
/// from `config.seed`, so the run is a pure function of its inputs.
pub fn train<T: Scalar>(model: &mut TSTransformer<T>, data: &WindowedDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mc = model.config();
    if data.lookback() != mc.lookback || data.horizon() != mc.horizon || data.n_channels() != mc.n_variates {
        return Err(TrainError::Config(format!(
            "windows are {}x{} -> {} but the model expects {}x{} -> {}",
            data.lookback(),
            data.n_channels(),
            data.horizon(),
            mc.lookback,
            mc.n_variates,
            mc.horizon
        )));
    }
    let target_channel = (!config.all_channels_loss).then(|| data.series().target_index());
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut adam = Adam::new(&model.parameters().iter().map(|(_, t)| t.len()).collect::<Vec<_>>(), config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let x = data.batch_inputs::<T>(idx)?;
            let y = data.batch_targets::<T>(idx, config.all_channels_loss)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let pred = model.forward_taped(&mut tape, &bound, &x)?;
            let loss = mse_loss(&mut tape, pred, &y, target_channel)?;
            let value = tape.value(loss)?.data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            tape.backward(loss)?;
            let grads: Vec<&[T]> = bound
                .vars()
                .iter()
                .map(|&v| tape.grad(v).expect("parameter leaves carry gradients"))
                .collect();
            adam.step(&mut model.parameters_mut(), &grads, &names)?;
            total += value * idx.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {} mean loss {mean:.6e}", epoch + 1);
        history.push(mean);
        if config.target_loss.is_some_and(|t| mean <= t) {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
        if mean < best {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        loss_history: history,
        stopped_early,
    })
}

//! MSE loss, the Adam optimizer and the early-stopped training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::Regressor;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement tolerated after the best one.
    pub patience: usize,
    /// Validation MSE must drop by more than this to count as improvement.
    pub min_delta: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 500,
            patience: 40,
            min_delta: 0.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be at least 1");
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad("min_delta must be non-negative");
        }
        Ok(())
    }
}

/// Records `mean((pred - target)²)` on the tape.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Plain mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: vec![params.len(), self.m.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(cfg.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(cfg.beta2, f64::from(t));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// `patience` epochs passed without improvement.
    EarlyStopped,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::EarlyStopped => "early_stopped",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean squared error over the epoch's mini-batches, before each update.
    pub train_mse: f64,
    /// Validation MSE after the epoch.
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stop_reason: StopReason,
}

/// Mean squared error of `model` over `data`, in scaled units.
pub fn evaluate_mse<M: Regressor + ?Sized>(model: &M, data: &WindowedDataset) -> Result<f64> {
    let pred = predict_dataset(model, data)?;
    mse(pred.data(), data.targets.data())
}

/// Predictions for every window of `data`, computed in chunks.
pub fn predict_dataset<M: Regressor + ?Sized>(model: &M, data: &WindowedDataset) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let (x, _) = data.batch(chunk)?;
        out.extend_from_slice(model.predict(&x)?.data());
    }
    Tensor::new(vec![out.len()], out)
}

/// Trains with per-epoch shuffled mini-batches and early stopping, leaving
/// the best-validation parameters in `model`.
pub fn train<M: Regressor + ?Sized>(
    model: &mut M,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<M, F>(
    model: &mut M,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    M: Regressor + ?Sized,
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    let mc = model.config();
    for ds in [train_set, val_set] {
        if ds.window_len() != mc.window_len || ds.num_channels() != mc.num_channels {
            return Err(Error::InvalidConfig(format!(
                "dataset windows are {}x{}, model expects {}x{}",
                ds.window_len(),
                ds.num_channels(),
                mc.window_len,
                mc.num_channels
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params().tensors());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum_sq = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let loss = step(model, &mut adam, train_set, idx, cfg).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: b + 1 },
                other => other,
            })?;
            sum_sq += loss * idx.len() as f64;
        }
        let train_mse = sum_sq / train_set.len() as f64;
        let val_mse = evaluate_mse(model, val_set).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: 0 },
            other => other,
        })?;
        let record = EpochRecord { epoch, train_mse, val_mse };
        epochs.push(record);
        on_epoch(&record);

        let improved = match &best {
            None => true,
            Some((_, best_val, _)) => val_mse < best_val - cfg.min_delta,
        };
        if improved {
            best = Some((epoch, val_mse, model.params().clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    let (best_epoch, best_val_mse, params) = best.expect("at least one epoch ran");
    model.params_mut().load_from(&params)?;
    Ok(TrainHistory {
        epochs,
        best_epoch,
        best_val_mse,
        stop_reason,
    })
}

/// Forward, backward and Adam update on one mini-batch; returns its loss.
fn step<M: Regressor + ?Sized>(
    model: &mut M,
    adam: &mut AdamState,
    data: &WindowedDataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (x, y) = data.batch(indices)?;
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape, true);
    let x = tape.constant(x);
    let y = tape.constant(y);
    let pred = model.forward(&mut tape, &params, x)?;
    let loss = mse_loss(&mut tape, pred, y)?;
    let value = tape.value(loss).item().expect("scalar loss");
    tape.backward(loss)?;
    let grads: Vec<Tensor> = params
        .vars()
        .iter()
        .map(|&v| tape.grad(v).expect("parameters are tracked"))
        .collect();
    adam.step(model.params_mut().tensors_mut(), &grads, cfg)?;
    Ok(value)
}

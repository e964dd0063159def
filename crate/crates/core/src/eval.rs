//! Metrics in physical units, single runs and multi-seed aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ScalerParams, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{BaselineKind, LinearRegression, ModelConfig, ModelKind, Network, Regressor};
use crate::pipeline::PreparedData;
use crate::train::{mse, predict_dataset, train_with, EpochRecord, TrainConfig, TrainHistory};
use crate::tensor::Tensor;

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(libm::sqrt(mse(pred, target)?))
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| libm::fabs(p - t)).sum::<f64>() / pred.len() as f64)
}

/// Test-set metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    /// µg/m³.
    pub rmse: f64,
    /// µg/m³.
    pub mae: f64,
    /// MSE in scaled units.
    pub scaled_mse: f64,
}

/// Scores scaled predictions against scaled targets after mapping both
/// back to µg/m³.
pub fn score(seed: u64, pred: &Tensor, data: &WindowedDataset, scaler: &ScalerParams) -> Result<RunMetrics> {
    let scaled_mse = mse(pred.data(), data.targets.data())?;
    let p: Vec<f64> = pred.data().iter().map(|&v| scaler.invert_target(v)).collect();
    let t: Vec<f64> = data.targets.data().iter().map(|&v| scaler.invert_target(v)).collect();
    Ok(RunMetrics {
        seed,
        rmse: rmse(&p, &t)?,
        mae: mae(&p, &t)?,
        scaled_mse,
    })
}

/// Mean and spread of one method over its runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub rmse_mean: f64,
    /// Population standard deviation; absent for a single run.
    pub rmse_std: Option<f64>,
    pub mae_mean: f64,
    pub mae_std: Option<f64>,
    pub num_runs: usize,
    pub seeds: Vec<u64>,
}

/// Population mean and standard deviation; the deviation is `None` for a
/// single value.
pub fn mean_std(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("cannot aggregate zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, Some(libm::sqrt(var))))
}

impl ReportRow {
    pub fn aggregate(method: &str, runs: &[RunMetrics]) -> Result<Self> {
        let rmses: Vec<f64> = runs.iter().map(|r| r.rmse).collect();
        let maes: Vec<f64> = runs.iter().map(|r| r.mae).collect();
        let (rmse_mean, rmse_std) = mean_std(&rmses)?;
        let (mae_mean, mae_std) = mean_std(&maes)?;
        Ok(Self {
            method: method.into(),
            rmse_mean,
            rmse_std,
            mae_mean,
            mae_std,
            num_runs: runs.len(),
            seeds: runs.iter().map(|r| r.seed).collect(),
        })
    }

    pub fn rmse_cell(&self) -> String {
        format_mean_std(self.rmse_mean, self.rmse_std)
    }

    pub fn mae_cell(&self) -> String {
        format_mean_std(self.mae_mean, self.mae_std)
    }
}

/// `"5.197 ± 0.28"`, or just `"5.197"` without a deviation.
pub fn format_mean_std(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.3} ± {s:.2}"),
        None => format!("{mean:.3}"),
    }
}

/// Everything one seeded run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub model: TrainedModel,
    pub history: Option<TrainHistory>,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Network(Network),
    Linear(LinearRegression),
}

impl TrainedModel {
    pub fn predict_dataset(&self, data: &WindowedDataset) -> Result<Tensor> {
        match self {
            TrainedModel::Network(n) => predict_dataset(n, data),
            TrainedModel::Linear(m) => m.predict(&data.windows),
        }
    }
}

/// A method that can appear as a report row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Network(ModelKind),
    Mlr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Network(k) => k.name(),
            Method::Mlr => BaselineKind::Mlr.name(),
        }
    }
}

impl From<BaselineKind> for Method {
    fn from(kind: BaselineKind) -> Self {
        kind.network().map_or(Method::Mlr, Method::Network)
    }
}

/// Trains (or fits) one model with `seed` driving both initialization and
/// shuffling, then scores it on the test split.
pub fn run_once<F: FnMut(&EpochRecord)>(
    method: Method,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &PreparedData,
    seed: u64,
    on_epoch: F,
) -> Result<RunOutcome> {
    let (model, history) = match method {
        Method::Mlr => {
            let m = LinearRegression::fit(&data.train.windows, &data.train.targets)?;
            (TrainedModel::Linear(m), None)
        }
        Method::Network(kind) => {
            let mc = ModelConfig { seed, ..model_cfg.clone() };
            let tc = TrainConfig { seed, ..train_cfg.clone() };
            let mut net = Network::build(kind, &mc)?;
            let history = train_with(&mut net, &data.train, &data.val, &tc, on_epoch)?;
            (TrainedModel::Network(net), Some(history))
        }
    };
    let pred = model.predict_dataset(&data.test)?;
    let metrics = score(seed, &pred, &data.test, &data.scaler)?;
    Ok(RunOutcome { model, history, metrics })
}

/// Parameter count of a network, for reports.
pub fn num_parameters(net: &Network) -> usize {
    net.params().num_scalars()
}

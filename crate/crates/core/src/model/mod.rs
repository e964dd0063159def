//! The STGAT-Fuser network, its ablation variants and the baselines it is
//! compared against.

mod baselines;
mod config;
mod fusion;

use alloc::vec::Vec;

pub use baselines::{Baseline, BaselineKind, CnnModel, LinearRegression, LstmModel, MlpModel, MLR_RIDGE};
pub use config::ModelConfig;
pub use fusion::{FusionModel, GatBranch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Bound, LinearLayer, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A trainable model mapping `(batch, window, channels)` windows to one
/// calibrated value per window.
pub trait Regressor {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the forward pass on `tape`; returns a `(batch)` tensor.
    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var>;

    /// Inference without gradient tracking.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params().bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Which network architecture a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "STGAT-Fuser")]
    StgatFuser,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "LSTM")]
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::StgatFuser => "STGAT-Fuser",
            ModelKind::Mlp => "MLP",
            ModelKind::Cnn => "CNN",
            ModelKind::Lstm => "LSTM",
        }
    }
}

/// Any of the trainable architectures behind one type.
#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Fusion(FusionModel),
    Mlp(MlpModel),
    Cnn(CnnModel),
    Lstm(LstmModel),
}

impl Network {
    pub fn build(kind: ModelKind, config: &ModelConfig) -> Result<Self> {
        Ok(match kind {
            ModelKind::StgatFuser => Network::Fusion(FusionModel::new(config)?),
            ModelKind::Mlp => Network::Mlp(MlpModel::new(config)?),
            ModelKind::Cnn => Network::Cnn(CnnModel::new(config)?),
            ModelKind::Lstm => Network::Lstm(LstmModel::new(config)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Fusion(_) => ModelKind::StgatFuser,
            Network::Mlp(_) => ModelKind::Mlp,
            Network::Cnn(_) => ModelKind::Cnn,
            Network::Lstm(_) => ModelKind::Lstm,
        }
    }

    fn inner(&self) -> &dyn Regressor {
        match self {
            Network::Fusion(m) => m,
            Network::Mlp(m) => m,
            Network::Cnn(m) => m,
            Network::Lstm(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Regressor {
        match self {
            Network::Fusion(m) => m,
            Network::Mlp(m) => m,
            Network::Cnn(m) => m,
            Network::Lstm(m) => m,
        }
    }
}

impl Regressor for Network {
    fn config(&self) -> &ModelConfig {
        self.inner().config()
    }

    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }

    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        self.inner().forward(tape, params, x)
    }
}

/// Report label of each ablation variant.
pub const FULL_MODEL: &str = "STGAT-Fuser";
pub const WITHOUT_TEMPORAL: &str = "w/o Temporal GATv2";
pub const WITHOUT_SPATIAL: &str = "w/o Spatial GATv2";
pub const WITHOUT_BOTH: &str = "w/o Both GATv2";

/// The four ablation configurations: the full model, then without the
/// temporal branch, without the spatial branch and without both. They
/// differ only in the two branch flags.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    [
        (FULL_MODEL, true, true),
        (WITHOUT_TEMPORAL, false, true),
        (WITHOUT_SPATIAL, true, false),
        (WITHOUT_BOTH, false, false),
    ]
    .into_iter()
    .map(|(name, temporal, spatial)| {
        let mut cfg = base.clone();
        cfg.use_temporal_gat = temporal;
        cfg.use_spatial_gat = spatial;
        (name, cfg)
    })
    .collect()
}

/// Stack of fully connected layers with LeakyReLU between them (not after
/// the last one).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    pub layers: Vec<LinearLayer>,
    pub leaky_slope: f64,
}

impl DenseHead {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        widths: &[usize],
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut width = in_features;
        for (i, &out) in widths.iter().enumerate() {
            layers.push(LinearLayer::new(store, &alloc::format!("{name}.{i}"), width, out, rng));
            width = out;
        }
        Self { layers, leaky_slope }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let mut y = x;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(tape, params, y)?;
            if i + 1 < self.layers.len() {
                y = tape.leaky_relu(y, self.leaky_slope)?;
            }
        }
        Ok(y)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LinearLayer::num_params).sum()
    }
}

/// Checks an input batch against the configured window geometry.
pub(crate) fn check_input(config: &ModelConfig, tape: &Tape, x: Var) -> Result<usize> {
    let shape = tape.shape(x);
    match shape {
        [b, w, c] if *w == config.window_len && *c == config.num_channels => Ok(*b),
        _ => Err(Error::ShapeMismatch {
            op: "model input",
            lhs: shape.to_vec(),
            rhs: alloc::vec![config.window_len, config.num_channels],
        }),
    }
}

/// Drops the trailing unit axis of a `(batch, 1)` head output.
pub(crate) fn squeeze_output(tape: &mut Tape, y: Var, batch: usize) -> Result<Var> {
    tape.reshape(y, &[batch])
}

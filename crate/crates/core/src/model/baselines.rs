use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, squeeze_output, DenseHead, ModelConfig, ModelKind, Regressor};
use crate::error::{invalid, Error, Result};
use crate::layers::{Bound, Conv1dLayer, LinearLayer, LstmLayer, ParamStore};
use crate::linalg::solve_spd;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ridge term added to the normal equations of the linear baseline.
pub const MLR_RIDGE: f64 = 1e-8;

/// Comparison methods that can be run next to the fusion model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "MLR")]
    Mlr,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "LSTM")]
    Lstm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Mlr, BaselineKind::Mlp, BaselineKind::Cnn, BaselineKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mlr => "MLR",
            BaselineKind::Mlp => "MLP",
            BaselineKind::Cnn => "CNN",
            BaselineKind::Lstm => "LSTM",
        }
    }

    /// The trainable architecture, or `None` for the closed-form MLR.
    pub fn network(self) -> Option<ModelKind> {
        match self {
            BaselineKind::Mlr => None,
            BaselineKind::Mlp => Some(ModelKind::Mlp),
            BaselineKind::Cnn => Some(ModelKind::Cnn),
            BaselineKind::Lstm => Some(ModelKind::Lstm),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown baseline kind {s:?}; expected one of MLR, MLP, CNN, LSTM")))
    }
}

/// A fitted comparison model.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Linear(LinearRegression),
    Network(super::Network),
}

impl Baseline {
    pub fn predict(&self, windows: &Tensor) -> Result<Tensor> {
        match self {
            Baseline::Linear(m) => m.predict(windows),
            Baseline::Network(m) => m.predict(windows),
        }
    }
}

fn flat_width(config: &ModelConfig) -> usize {
    config.window_len * config.num_channels
}

/// Flattened window, one hidden layer, then the dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub input: LinearLayer,
    pub head: DenseHead,
}

impl MlpModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let input = LinearLayer::new(&mut store, "input", flat_width(config), config.lstm_hidden, &mut rng);
        let head = DenseHead::new(&mut store, "head", config.lstm_hidden, &config.fc_hidden_dims, config.leaky_slope, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            input,
            head,
        })
    }
}

impl Regressor for MlpModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let batch = check_input(&self.config, tape, x)?;
        let flat = tape.reshape(x, &[batch, flat_width(&self.config)])?;
        let hidden = self.input.forward(tape, params, flat)?;
        let hidden = tape.leaky_relu(hidden, self.config.leaky_slope)?;
        let y = self.head.forward(tape, params, hidden)?;
        squeeze_output(tape, y, batch)
    }
}

/// Two same-padded convolutions over time, flattened into the dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub conv1: Conv1dLayer,
    pub conv2: Conv1dLayer,
    pub head: DenseHead,
}

impl CnnModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let conv1 = Conv1dLayer::same(&mut store, "conv1", c.num_channels, c.conv_out_channels, c.conv_kernel_size, &mut rng)?;
        let conv2 = Conv1dLayer::same(&mut store, "conv2", c.conv_out_channels, c.conv_out_channels, c.conv_kernel_size, &mut rng)?;
        let head = DenseHead::new(
            &mut store,
            "head",
            c.conv_out_channels * c.window_len,
            &c.fc_hidden_dims,
            c.leaky_slope,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            store,
            conv1,
            conv2,
            head,
        })
    }
}

impl Regressor for CnnModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let batch = check_input(&self.config, tape, x)?;
        let slope = self.config.leaky_slope;
        let series = tape.transpose(x, 1, 2)?;
        let h = self.conv1.forward(tape, params, series)?;
        let h = tape.leaky_relu(h, slope)?;
        let h = self.conv2.forward(tape, params, h)?;
        let h = tape.leaky_relu(h, slope)?;
        let flat = tape.reshape(h, &[batch, self.config.conv_out_channels * self.config.window_len])?;
        let y = self.head.forward(tape, params, flat)?;
        squeeze_output(tape, y, batch)
    }
}

/// Two stacked LSTMs; the final hidden state feeds the dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    pub head: DenseHead,
}

impl LstmModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let lstm1 = LstmLayer::new(&mut store, "lstm1", c.num_channels, c.lstm_hidden, &mut rng);
        let lstm2 = LstmLayer::new(&mut store, "lstm2", c.lstm_hidden, c.lstm_hidden, &mut rng);
        let head = DenseHead::new(&mut store, "head", c.lstm_hidden, &c.fc_hidden_dims, c.leaky_slope, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            lstm1,
            lstm2,
            head,
        })
    }
}

impl Regressor for LstmModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let batch = check_input(&self.config, tape, x)?;
        let first = self.lstm1.forward(tape, params, x, None)?;
        let second = self.lstm2.forward(tape, params, first.outputs, None)?;
        let y = self.head.forward(tape, params, second.h)?;
        squeeze_output(tape, y, batch)
    }
}

/// Ordinary least squares on flattened windows.
///
/// Solved in closed form from the normal equations with a small ridge term
/// on the coefficients (the intercept is not penalized).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRegression {
    /// One weight per flattened `(step, channel)` input, row-major.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearRegression {
    /// Fits `targets (n)` against `inputs (n, ...)`; trailing axes are
    /// flattened.
    pub fn fit(inputs: &Tensor, targets: &Tensor) -> Result<Self> {
        Self::fit_with_ridge(inputs, targets, MLR_RIDGE)
    }

    pub fn fit_with_ridge(inputs: &Tensor, targets: &Tensor, ridge: f64) -> Result<Self> {
        let (n, p) = rows(inputs)?;
        if targets.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "mlr",
                lhs: inputs.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(invalid("mlr", "ridge must be finite and non-negative"));
        }
        // Augmented design [x, 1]; accumulate XᵀX and Xᵀy.
        let q = p + 1;
        let mut xtx = vec![0.0; q * q];
        let mut xty = vec![0.0; q];
        let mut row = vec![1.0; q];
        for (r, &y) in inputs.data().chunks_exact(p).zip(targets.data()) {
            row[..p].copy_from_slice(r);
            for i in 0..q {
                xty[i] += row[i] * y;
                for j in 0..=i {
                    xtx[i * q + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..q {
            for j in 0..i {
                xtx[j * q + i] = xtx[i * q + j];
            }
        }
        for i in 0..p {
            xtx[i * q + i] += ridge;
        }
        let mut beta = solve_spd(&xtx, q, &xty)?;
        let intercept = beta.pop().expect("q >= 1");
        Ok(Self {
            coefficients: beta,
            intercept,
        })
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let (n, p) = rows(inputs)?;
        if p != self.coefficients.len() {
            return Err(Error::ShapeMismatch {
                op: "mlr",
                lhs: inputs.shape().to_vec(),
                rhs: vec![self.coefficients.len()],
            });
        }
        let out = inputs
            .data()
            .chunks_exact(p)
            .map(|r| self.intercept + r.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Tensor::new(vec![n], out)
    }
}

fn rows(inputs: &Tensor) -> Result<(usize, usize)> {
    match inputs.shape() {
        [] => Err(invalid("mlr", "inputs need a leading sample axis")),
        [n] => Ok((*n, 1)),
        [n, rest @ ..] => Ok((*n, rest.iter().product())),
    }
}

//! Parameter storage and the dense building blocks: fully connected, 1D
//! convolution, LSTM and layer normalization.
//!
//! Layers do not own their weights. They hold [`ParamId`]s into a
//! [`ParamStore`], which the training loop binds onto a fresh [`Tape`] for
//! every step and which the optimizer updates in place.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }

    /// Replaces every tensor with one of identical name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ParamMismatch(format!(
                "expected parameters {:?}, found {:?}",
                self.names, other.names
            )));
        }
        for ((name, dst), src) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Tape handles for every tensor of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform initialization in `±sqrt(1 / fan_in)`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrt(1.0 / fan_in.max(1) as f64);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn expect_shape(op: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

fn last_dim(tape: &Tape, x: Var) -> usize {
    tape.shape(x).last().copied().unwrap_or(1)
}

/// `y = x Wᵀ + b` over the last axis of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = uniform_init(rng, &[out_features, in_features], in_features);
        let bias = uniform_init(rng, &[out_features], in_features);
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_features,
            out_features,
        }
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(invalid("linear", "weight must be (out x in)"));
        }
        let (out_features, in_features) = (weight.shape()[0], weight.shape()[1]);
        expect_shape("linear", &bias, &[out_features])?;
        Ok(Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        if last_dim(tape, x) != self.in_features {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.out_features, self.in_features],
            });
        }
        let y = tape.matmul_nt(x, params.get(self.weight))?;
        tape.add(y, params.get(self.bias))
    }

    pub fn num_params(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}

/// Cross-correlation over the last axis of `(batch, channels, len)` input.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size == 0 {
            return Err(invalid("conv1d", "kernel size must be at least 1"));
        }
        let fan_in = in_channels * kernel_size;
        let kernel = uniform_init(rng, &[out_channels, in_channels, kernel_size], fan_in);
        let bias = uniform_init(rng, &[out_channels], fan_in);
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), kernel),
            bias: store.add(format!("{name}.bias"), bias),
            in_channels,
            out_channels,
            kernel_size,
            padding,
        })
    }

    /// Layer whose output length equals its input length. Needs an odd
    /// kernel so the padding is symmetric.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(invalid(
                "conv1d",
                format!("same padding needs an odd kernel size, got {kernel_size}"),
            ));
        }
        Self::new(store, name, in_channels, out_channels, kernel_size, kernel_size / 2, rng)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        kernel: Tensor,
        bias: Tensor,
        padding: usize,
    ) -> Result<Self> {
        if kernel.rank() != 3 {
            return Err(invalid("conv1d", "kernel must be (out x in x size)"));
        }
        let (out_channels, in_channels, kernel_size) =
            (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        expect_shape("conv1d", &bias, &[out_channels])?;
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), kernel),
            bias: store.add(format!("{name}.bias"), bias),
            in_channels,
            out_channels,
            kernel_size,
            padding,
        })
    }

    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        (input_len + 2 * self.padding + 1).checked_sub(self.kernel_size).filter(|&l| l >= 1)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: shape.to_vec(),
                rhs: vec![self.out_channels, self.in_channels, self.kernel_size],
            });
        }
        tape.conv1d(x, params.get(self.kernel), params.get(self.bias), self.padding)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel_size + 1)
    }
}

/// Gate blocks are stacked in the order input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// Every hidden state plus the final `(h, c)` pair.
#[derive(Clone, Copy, Debug)]
pub struct LstmOutput {
    /// `(batch, time, hidden)`
    pub outputs: Var,
    pub h: Var,
    pub c: Var,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let gates = 4 * hidden_size;
        let w_ih = uniform_init(rng, &[gates, input_size], input_size);
        let w_hh = uniform_init(rng, &[gates, hidden_size], hidden_size);
        let mut bias = uniform_init(rng, &[gates], hidden_size);
        bias.data_mut()[hidden_size..2 * hidden_size].fill(1.0);
        Self {
            w_ih: store.add(format!("{name}.w_ih"), w_ih),
            w_hh: store.add(format!("{name}.w_hh"), w_hh),
            bias: store.add(format!("{name}.bias"), bias),
            input_size,
            hidden_size,
        }
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        w_ih: Tensor,
        w_hh: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        if w_ih.rank() != 2 || w_ih.shape()[0] % 4 != 0 {
            return Err(invalid("lstm", "w_ih must be (4 hidden x input)"));
        }
        let hidden_size = w_ih.shape()[0] / 4;
        let input_size = w_ih.shape()[1];
        expect_shape("lstm", &w_hh, &[4 * hidden_size, hidden_size])?;
        expect_shape("lstm", &bias, &[4 * hidden_size])?;
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), w_ih),
            w_hh: store.add(format!("{name}.w_hh"), w_hh),
            bias: store.add(format!("{name}.bias"), bias),
            input_size,
            hidden_size,
        })
    }

    /// One recurrence step from pre-computed input gates `x_gates: (batch,
    /// 4 hidden)`, which already include the bias.
    fn step(&self, tape: &mut Tape, params: &Bound, x_gates: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hh = tape.matmul_nt(h, params.get(self.w_hh))?;
        let gates = tape.add(x_gates, hh)?;
        let n = self.hidden_size;
        let i = tape.slice(gates, 1, 0, n)?;
        let f = tape.slice(gates, 1, n, n)?;
        let g = tape.slice(gates, 1, 2 * n, n)?;
        let o = tape.slice(gates, 1, 3 * n, n)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c)?;
        let h = tape.mul(o, squashed)?;
        Ok((h, c))
    }

    /// Single cell update on `x: (batch, input)`.
    pub fn cell(&self, tape: &mut Tape, params: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xg = tape.matmul_nt(x, params.get(self.w_ih))?;
        let xg = tape.add(xg, params.get(self.bias))?;
        self.step(tape, params, xg, h, c)
    }

    /// Runs the recurrence over `x: (batch, time, input)`. Missing initial
    /// states start at zero.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        state: Option<(Var, Var)>,
    ) -> Result<LstmOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_size {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                lhs: shape,
                rhs: vec![4 * self.hidden_size, self.input_size],
            });
        }
        let (batch, time) = (shape[0], shape[1]);
        let (mut h, mut c) = match state {
            Some(s) => s,
            None => {
                let h = tape.constant(Tensor::zeros(&[batch, self.hidden_size]));
                let c = tape.constant(Tensor::zeros(&[batch, self.hidden_size]));
                (h, c)
            }
        };
        for s in [h, c] {
            if tape.shape(s) != [batch, self.hidden_size] {
                return Err(Error::ShapeMismatch {
                    op: "lstm",
                    lhs: tape.shape(s).to_vec(),
                    rhs: vec![batch, self.hidden_size],
                });
            }
        }
        let gates = 4 * self.hidden_size;
        let xg = tape.matmul_nt(x, params.get(self.w_ih))?;
        let xg = tape.add(xg, params.get(self.bias))?;
        let mut outputs = Vec::with_capacity(time);
        for t in 0..time {
            let xt = tape.slice(xg, 1, t, 1)?;
            let xt = tape.reshape(xt, &[batch, gates])?;
            (h, c) = self.step(tape, params, xt, h, c)?;
            outputs.push(tape.reshape(h, &[batch, 1, self.hidden_size])?);
        }
        let outputs = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs, 1)?
        };
        Ok(LstmOutput { outputs, h, c })
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden_size * (self.input_size + self.hidden_size + 1)
    }
}

/// Normalizes the last axis to zero mean and unit variance, then applies a
/// learned gain and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub offset: ParamId,
    pub features: usize,
    pub epsilon: f64,
}

impl LayerNormLayer {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[features])),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[features])),
            features,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        gain: Tensor,
        offset: Tensor,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(invalid("layer_norm", "epsilon must be positive"));
        }
        if gain.rank() != 1 {
            return Err(invalid("layer_norm", "gain must be one-dimensional"));
        }
        let features = gain.numel();
        expect_shape("layer_norm", &offset, &[features])?;
        Ok(Self {
            gain: store.add(format!("{name}.gain"), gain),
            offset: store.add(format!("{name}.offset"), offset),
            features,
            epsilon,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.features) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: vec![self.features],
            });
        }
        let axis = shape.len() - 1;
        let mut kept = shape.clone();
        kept[axis] = 1;
        let mean = tape.mean(x, axis)?;
        let mean = tape.reshape(mean, &kept)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean(sq, axis)?;
        let var = tape.reshape(var, &kept)?;
        let var = tape.add_scalar(var, self.epsilon)?;
        let std = tape.sqrt(var)?;
        let normed = tape.div(centered, std)?;
        let scaled = tape.mul(normed, params.get(self.gain))?;
        tape.add(scaled, params.get(self.offset))
    }

    pub fn num_params(&self) -> usize {
        2 * self.features
    }
}

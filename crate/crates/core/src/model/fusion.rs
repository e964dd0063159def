use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_input, squeeze_output, DenseHead, ModelConfig, Regressor};
use crate::error::Result;
use crate::gat::{Gatv2Layer, Graph};
use crate::layers::{Bound, Conv1dLayer, LayerNormLayer, LstmLayer, ParamStore};
use crate::tape::{Tape, Var};

/// GATv2 heads sharing one graph. Head outputs are averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct GatBranch {
    pub heads: Vec<Gatv2Layer>,
    pub graph: Graph,
}

impl GatBranch {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        nodes: usize,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let heads = (0..heads)
            .map(|h| Gatv2Layer::new(store, &format!("{name}.head{h}"), in_dim, out_dim, out_dim, slope, rng))
            .collect();
        Ok(Self {
            heads,
            graph: Graph::complete(nodes, true)?,
        })
    }

    /// `h: (batch, nodes, in_dim)` to `(batch, nodes, out_dim)`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, h: Var) -> Result<Var> {
        let mut acc = None;
        for head in &self.heads {
            let (out, _) = head.forward(tape, params, h, &self.graph)?;
            acc = Some(match acc {
                None => out,
                Some(prev) => tape.add(prev, out)?,
            });
        }
        let sum = acc.expect("at least one head");
        if self.heads.len() == 1 {
            Ok(sum)
        } else {
            tape.scale(sum, 1.0 / self.heads.len() as f64)
        }
    }

    pub fn num_params(&self) -> usize {
        self.heads.iter().map(Gatv2Layer::num_params).sum()
    }
}

/// The spatial-temporal fusion network.
///
/// Per window `x: (window, channels)`:
///
/// 1. A same-padded 1D convolution over time (sensor channels as input
///    channels) followed by LeakyReLU gives per-step features `(window,
///    conv_out)`.
/// 2. Temporal GATv2: one node per time step, node features are the conv
///    features of that step. Output `(window, gat_out)`.
/// 3. Spatial GATv2: one node per sensor channel, node features are that
///    channel's series over the window. The node embeddings `(channels,
///    gat_out)` are read out at every step by weighting them with that
///    step's readings, `x_t · H / channels`, giving `(window, gat_out)`.
/// 4. The three per-step feature blocks are concatenated and passed through
///    LSTM, layer normalization, a second LSTM, and the dense head applied to
///    the final hidden state.
///
/// Disabled branches are not built at all.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub conv: Conv1dLayer,
    pub temporal: Option<GatBranch>,
    pub spatial: Option<GatBranch>,
    pub lstm1: LstmLayer,
    pub norm: LayerNormLayer,
    pub lstm2: LstmLayer,
    pub head: DenseHead,
}

impl FusionModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config;
        let conv = Conv1dLayer::same(&mut store, "conv", c.num_channels, c.conv_out_channels, c.conv_kernel_size, &mut rng)?;
        let temporal = if c.use_temporal_gat {
            Some(GatBranch::new(
                &mut store,
                "temporal_gat",
                c.window_len,
                c.conv_out_channels,
                c.gat_out_dim,
                c.gat_heads,
                c.leaky_slope,
                &mut rng,
            )?)
        } else {
            None
        };
        let spatial = if c.use_spatial_gat {
            Some(GatBranch::new(
                &mut store,
                "spatial_gat",
                c.num_channels,
                c.window_len,
                c.gat_out_dim,
                c.gat_heads,
                c.leaky_slope,
                &mut rng,
            )?)
        } else {
            None
        };
        let fused = Self::fused_width_for(c);
        let lstm1 = LstmLayer::new(&mut store, "lstm1", fused, c.lstm_hidden, &mut rng);
        let norm = LayerNormLayer::new(&mut store, "norm", c.lstm_hidden);
        let lstm2 = LstmLayer::new(&mut store, "lstm2", c.lstm_hidden, c.lstm_hidden, &mut rng);
        let head = DenseHead::new(&mut store, "head", c.lstm_hidden, &c.fc_hidden_dims, c.leaky_slope, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            conv,
            temporal,
            spatial,
            lstm1,
            norm,
            lstm2,
            head,
        })
    }

    /// Width of the per-step concatenation fed to the first LSTM.
    pub fn fused_width_for(config: &ModelConfig) -> usize {
        config.conv_out_channels
            + usize::from(config.use_temporal_gat) * config.gat_out_dim
            + usize::from(config.use_spatial_gat) * config.gat_out_dim
    }

    pub fn fused_width(&self) -> usize {
        Self::fused_width_for(&self.config)
    }

    /// Per-step fused features `(batch, window, fused_width)`.
    pub fn fuse(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        check_input(&self.config, tape, x)?;
        let slope = self.config.leaky_slope;
        // (batch, channels, window)
        let series = tape.transpose(x, 1, 2)?;
        let conv = self.conv.forward(tape, params, series)?;
        let conv = tape.leaky_relu(conv, slope)?;
        let steps = tape.transpose(conv, 1, 2)?;
        let mut parts = alloc::vec![steps];
        if let Some(branch) = &self.temporal {
            parts.push(branch.forward(tape, params, steps)?);
        }
        if let Some(branch) = &self.spatial {
            let nodes = branch.forward(tape, params, series)?;
            let readout = tape.matmul(x, nodes)?;
            parts.push(tape.scale(readout, 1.0 / self.config.num_channels as f64)?);
        }
        if parts.len() == 1 {
            Ok(steps)
        } else {
            tape.concat(&parts, 2)
        }
    }
}

impl Regressor for FusionModel {
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
        let fused = self.fuse(tape, params, x)?;
        let first = self.lstm1.forward(tape, params, fused, None)?;
        let normed = self.norm.forward(tape, params, first.outputs)?;
        let second = self.lstm2.forward(tape, params, normed, None)?;
        let y = self.head.forward(tape, params, second.h)?;
        squeeze_output(tape, y, batch)
    }
}

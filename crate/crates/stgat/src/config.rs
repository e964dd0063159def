//! The flat TOML configuration file.
//!
//! Every key is optional and overrides the built-in default; command-line
//! flags in turn override the file. Keys:
//!
//! | key | default |
//! |-----|---------|
//! | `window_len` | 4 |
//! | `stride` | 1 |
//! | `train_fraction`, `val_fraction`, `test_fraction` | 0.8, 0.1, 0.1 |
//! | `conv_out_channels` | 32 |
//! | `conv_kernel_size` | 3 |
//! | `gat_out_dim` | 32 |
//! | `gat_heads` | 1 |
//! | `lstm_hidden` | 64 |
//! | `fc_hidden_dims` | `[32, 1]` |
//! | `use_temporal_gat`, `use_spatial_gat` | true |
//! | `leaky_slope` | 0.2 |
//! | `learning_rate` | 0.001 |
//! | `beta1`, `beta2`, `adam_eps` | 0.9, 0.999, 1e-8 |
//! | `batch_size` | 32 |
//! | `max_epochs` | 500 |
//! | `patience` | 40 |
//! | `min_delta` | 0 |
//! | `seed` | 1 (single-run commands) |
//! | `seeds` | `[1, 2, 3, 4, 5]` (multi-run commands) |
//!
//! The channel count is not configurable: it always comes from the corpus.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stgat_core::model::ModelConfig;
use stgat_core::pipeline::DataConfig;
use stgat_core::train::TrainConfig;

use crate::error::{Error, Result};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// The file as written; absent keys keep their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub window_len: Option<usize>,
    pub stride: Option<usize>,
    pub train_fraction: Option<f64>,
    pub val_fraction: Option<f64>,
    pub test_fraction: Option<f64>,
    pub conv_out_channels: Option<usize>,
    pub conv_kernel_size: Option<usize>,
    pub gat_out_dim: Option<usize>,
    pub gat_heads: Option<usize>,
    pub lstm_hidden: Option<usize>,
    pub fc_hidden_dims: Option<Vec<usize>>,
    pub use_temporal_gat: Option<bool>,
    pub use_spatial_gat: Option<bool>,
    pub leaky_slope: Option<f64>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

/// The configuration a command actually runs with. It is written into
/// every manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

/// Values given on the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
}

impl EffectiveConfig {
    /// Merges defaults, then `file`, then `overrides`. A single `seed`
    /// (from the file or the flags) wins over a `seeds` list only when no
    /// list was given at the same level. `num_channels` is the corpus
    /// channel count.
    pub fn resolve(file: &FileConfig, overrides: &Overrides, num_channels: usize) -> Result<Self> {
        let mut data = DataConfig::default();
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();

        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(data.window_len, file.window_len);
        set!(data.stride, file.stride);
        set!(data.split.0, file.train_fraction);
        set!(data.split.1, file.val_fraction);
        set!(data.split.2, file.test_fraction);
        model.window_len = data.window_len;
        model.num_channels = num_channels;
        set!(model.conv_out_channels, file.conv_out_channels);
        set!(model.conv_kernel_size, file.conv_kernel_size);
        set!(model.gat_out_dim, file.gat_out_dim);
        set!(model.gat_heads, file.gat_heads);
        set!(model.lstm_hidden, file.lstm_hidden);
        set!(model.fc_hidden_dims, file.fc_hidden_dims);
        set!(model.use_temporal_gat, file.use_temporal_gat);
        set!(model.use_spatial_gat, file.use_spatial_gat);
        set!(model.leaky_slope, file.leaky_slope);
        set!(train.learning_rate, file.learning_rate);
        set!(train.beta1, file.beta1);
        set!(train.beta2, file.beta2);
        set!(train.adam_eps, file.adam_eps);
        set!(train.batch_size, file.batch_size);
        set!(train.max_epochs, file.max_epochs);
        set!(train.patience, file.patience);
        set!(train.min_delta, file.min_delta);

        let seeds = match (&overrides.seeds, overrides.seed, &file.seeds, file.seed) {
            (Some(list), _, _, _) => list.clone(),
            (None, Some(s), _, _) => vec![s],
            (None, None, Some(list), _) => list.clone(),
            (None, None, None, Some(s)) => vec![s],
            (None, None, None, None) => DEFAULT_SEEDS.to_vec(),
        };
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config(format!("seeds must be distinct, got {seeds:?}")));
        }
        model.seed = seeds[0];
        train.seed = seeds[0];

        if data.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        model.validate()?;
        train.validate()?;
        Ok(Self {
            data,
            model,
            train,
            seeds,
        })
    }

    /// The seed of single-run commands.
    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    /// Short stable hash of the configuration, used in run directory names.
    pub fn short_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..4])
    }
}

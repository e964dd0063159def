use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the fusion model and the
/// trainable baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub window_len: usize,
    pub num_channels: usize,
    pub conv_out_channels: usize,
    /// Odd, so that "same" padding keeps the window length.
    pub conv_kernel_size: usize,
    pub gat_out_dim: usize,
    /// Attention heads per GATv2 branch; head outputs are averaged.
    pub gat_heads: usize,
    pub lstm_hidden: usize,
    /// Output widths of the fully connected head; the last must be 1.
    pub fc_hidden_dims: Vec<usize>,
    pub use_temporal_gat: bool,
    pub use_spatial_gat: bool,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_len: 4,
            num_channels: 7,
            conv_out_channels: 32,
            conv_kernel_size: 3,
            gat_out_dim: 32,
            gat_heads: 1,
            lstm_hidden: 64,
            fc_hidden_dims: vec![32, 1],
            use_temporal_gat: true,
            use_spatial_gat: true,
            leaky_slope: 0.2,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window_len", self.window_len),
            ("num_channels", self.num_channels),
            ("conv_out_channels", self.conv_out_channels),
            ("conv_kernel_size", self.conv_kernel_size),
            ("gat_out_dim", self.gat_out_dim),
            ("gat_heads", self.gat_heads),
            ("lstm_hidden", self.lstm_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.conv_kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv_kernel_size must be odd for same padding, got {}",
                self.conv_kernel_size
            )));
        }
        if self.fc_hidden_dims.is_empty() || self.fc_hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "fc_hidden_dims must be non-empty with positive widths".into(),
            ));
        }
        if self.fc_hidden_dims.last() != Some(&1) {
            return Err(Error::InvalidConfig(
                "the last fully connected layer must have width 1".into(),
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::InvalidConfig("leaky_slope must be finite and non-negative".into()));
        }
        Ok(())
    }
}

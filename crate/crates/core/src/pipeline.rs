//! The preprocessing chain: split, scale on train, window each split.

use serde::{Deserialize, Serialize};

use crate::data::{chrono_split, make_windows, RawSeries, ScalerParams, WindowedDataset, DEFAULT_SPLIT};
use crate::error::Result;

/// Window geometry and split fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub window_len: usize,
    pub stride: usize,
    pub split: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            window_len: 4,
            stride: 1,
            split: DEFAULT_SPLIT,
        }
    }
}

/// Scaled, windowed train/validation/test sets plus the scaler that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub scaler: ScalerParams,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    /// Steps in each split before windowing.
    pub split_lens: [usize; 3],
}

/// Splits chronologically, fits the scaler on the training part only and
/// windows each part separately, so no window crosses a split boundary.
pub fn prepare(series: &RawSeries, config: &DataConfig) -> Result<PreparedData> {
    let (train, val, test) = chrono_split(series, config.split, config.window_len)?;
    let scaler = ScalerParams::fit(&train)?;
    let window = |s: &RawSeries| make_windows(&scaler.apply(s)?, config.window_len, config.stride);
    Ok(PreparedData {
        train: window(&train)?,
        val: window(&val)?,
        test: window(&test)?,
        split_lens: [train.len(), val.len(), test.len()],
        scaler,
    })
}

/// Uses the scaler of an earlier run instead of fitting a new one. The
/// split is recomputed the same way.
pub fn prepare_with_scaler(series: &RawSeries, config: &DataConfig, scaler: &ScalerParams) -> Result<PreparedData> {
    let (train, val, test) = chrono_split(series, config.split, config.window_len)?;
    let window = |s: &RawSeries| make_windows(&scaler.apply(s)?, config.window_len, config.stride);
    Ok(PreparedData {
        train: window(&train)?,
        val: window(&val)?,
        test: window(&test)?,
        split_lens: [train.len(), val.len(), test.len()],
        scaler: scaler.clone(),
    })
}

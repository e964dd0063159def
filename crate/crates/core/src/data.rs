//! Sensor series, synthetic corpora, chronological splits, min-max scaling
//! and sliding windows.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Column names of the sensor channels, in input order.
pub const CHANNEL_NAMES: [&str; 7] = ["mox1", "mox2", "mox3", "mox4", "ec", "temp", "rh"];

/// Column name of the reference ozone concentration (µg/m³).
pub const TARGET_NAME: &str = "ref_o3";

/// One sensor node's hourly record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    timestamps: Vec<i64>,
    channel_names: Vec<String>,
    /// `(time, channel)` row-major.
    channels: Vec<f64>,
    target: Vec<f64>,
    /// Index of the first step within the series this one was cut from.
    origin: usize,
}

impl RawSeries {
    pub fn new(timestamps: Vec<i64>, channel_names: Vec<String>, channels: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        let len = timestamps.len();
        if len == 0 || channel_names.is_empty() {
            return Err(invalid("series", "a series needs at least one step and one channel"));
        }
        if channels.len() != len * channel_names.len() || target.len() != len {
            return Err(Error::ShapeMismatch {
                op: "series",
                lhs: vec![len, channel_names.len()],
                rhs: vec![channels.len(), target.len()],
            });
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotonicTimestamps(i + 1));
        }
        if channels.iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "series" });
        }
        Ok(Self {
            timestamps,
            channel_names,
            channels,
            target,
            origin: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// All channel readings, `(time, channel)` row-major.
    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    /// Readings of channel `c` over time.
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.channels.iter().skip(c).step_by(self.num_channels()).copied()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.num_channels();
        &self.channels[t * c..(t + 1) * c]
    }

    /// Steps `start..end`; provenance indices stay relative to the original
    /// series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(invalid("series", format!("bad range {start}..{end} of {}", self.len())));
        }
        let c = self.num_channels();
        Ok(Self {
            timestamps: self.timestamps[start..end].to_vec(),
            channel_names: self.channel_names.clone(),
            channels: self.channels[start * c..end * c].to_vec(),
            target: self.target[start..end].to_vec(),
            origin: self.origin + start,
        })
    }
}

/// Parameters of the synthetic sensor-node generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub len: usize,
    pub seed: u64,
    /// Window length the corpus is meant for; the series must be at least
    /// ten steps longer.
    pub window_len: usize,
    /// Unix time of the first hourly sample.
    pub start_epoch: i64,
    /// Peak-to-mean amplitude of the daily ozone cycle (µg/m³).
    pub diurnal_amplitude: f64,
    /// Amplitude of the slow multi-week drift (µg/m³).
    pub drift_amplitude: f64,
    /// Autoregressive coefficient of the weather-driven ozone anomaly.
    pub ar_coefficient: f64,
    /// Innovation standard deviation of that anomaly (µg/m³).
    pub ar_sigma: f64,
    /// Multiplier on every sensor's measurement noise.
    pub noise_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            len: 2000,
            seed: 1,
            window_len: 4,
            start_epoch: 1_496_275_200,
            diurnal_amplitude: 30.0,
            drift_amplitude: 12.0,
            ar_coefficient: 0.9,
            ar_sigma: 4.0,
            noise_scale: 1.0,
        }
    }
}

/// Metal-oxide sensor response `gain · o3^exponent · exp(temp_coef·(T−20))
/// · (1 + rh_coef·(RH−50)/50)`, seen through a first-order lag.
struct MoxSensor {
    gain: f64,
    exponent: f64,
    temp_coef: f64,
    rh_coef: f64,
    lag: f64,
    noise: f64,
}

const MOX_SENSORS: [MoxSensor; 4] = [
    MoxSensor { gain: 4.0, exponent: 0.55, temp_coef: 0.060, rh_coef: -0.60, lag: 0.55, noise: 0.25 },
    MoxSensor { gain: 2.2, exponent: 0.75, temp_coef: 0.045, rh_coef: -0.75, lag: 0.45, noise: 0.35 },
    MoxSensor { gain: 9.0, exponent: 0.40, temp_coef: 0.080, rh_coef: -0.50, lag: 0.65, noise: 0.30 },
    MoxSensor { gain: 1.1, exponent: 0.95, temp_coef: 0.035, rh_coef: -0.80, lag: 0.40, noise: 0.60 },
];

const HOUR: i64 = 3600;

/// Generates a synthetic hourly record of one sensor node.
///
/// The latent ozone concentration combines a daily cycle that follows
/// sunlight, a slow drift and an AR(1) weather anomaly. Temperature and
/// humidity follow their own daily cycles with noise. The four metal-oxide
/// channels respond to ozone through a power law modulated multiplicatively
/// by temperature and humidity, and each responds with its own lag, so the
/// current concentration depends on several steps of several channels. The
/// electrochemical channel is close to linear with a temperature offset and
/// more noise. The target is the latent concentration itself.
pub fn synthesize(config: &SynthConfig) -> Result<RawSeries> {
    let c = config;
    if c.len < c.window_len + 10 {
        return Err(Error::InvalidConfig(format!(
            "synthetic corpus needs at least window_len + 10 = {} steps, got {}",
            c.window_len + 10,
            c.len
        )));
    }
    let params = [c.diurnal_amplitude, c.drift_amplitude, c.ar_coefficient, c.ar_sigma, c.noise_scale];
    if params.iter().any(|v| !v.is_finite() || *v < 0.0) || c.ar_coefficient >= 1.0 {
        return Err(Error::DegenerateSynthesis(
            "amplitudes and noise must be finite and non-negative, with ar_coefficient in [0, 1)".to_string(),
        ));
    }
    if c.diurnal_amplitude == 0.0 && c.drift_amplitude == 0.0 && c.ar_sigma == 0.0 {
        return Err(Error::DegenerateSynthesis("ozone signal would have zero variance".to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let drift_phase = 2.0 * PI * rng.random::<f64>();
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };

    let n = c.len;
    let mut timestamps = Vec::with_capacity(n);
    let mut ozone = Vec::with_capacity(n);
    let mut temp = Vec::with_capacity(n);
    let mut rh = Vec::with_capacity(n);
    let mut anomaly = 0.0;
    let mut temp_anomaly = 0.0;
    let mut rh_anomaly = 0.0;
    for t in 0..n {
        let ts = c.start_epoch + t as i64 * HOUR;
        timestamps.push(ts);
        let hour = (ts.rem_euclid(86_400) / HOUR) as f64;
        let day = t as f64 / 24.0;
        // Photochemical production peaks mid-afternoon.
        let sun = libm::cos(2.0 * PI * (hour - 15.0) / 24.0);
        let drift = c.drift_amplitude * libm::sin(2.0 * PI * day / 23.0 + drift_phase);
        anomaly = c.ar_coefficient * anomaly + c.ar_sigma * normal();
        temp_anomaly = 0.97 * temp_anomaly + 0.6 * normal();
        let o3 = 60.0 + c.diurnal_amplitude * sun + drift + anomaly;
        ozone.push(softplus(o3 - 5.0) + 5.0);
        let tt = 22.0 + 6.0 * libm::cos(2.0 * PI * (hour - 14.0) / 24.0) + 0.3 * drift + temp_anomaly;
        temp.push(tt);
        rh_anomaly = 0.95 * rh_anomaly + 2.5 * normal();
        let h = 60.0 - 2.2 * (tt - 22.0) + rh_anomaly + 2.0 * normal();
        rh.push(h.clamp(8.0, 100.0));
    }

    let channels_n = CHANNEL_NAMES.len();
    let mut channels = vec![0.0; n * channels_n];
    for (k, s) in MOX_SENSORS.iter().enumerate() {
        let mut state = None;
        for t in 0..n {
            let response = s.gain
                * libm::pow(ozone[t], s.exponent)
                * libm::exp(s.temp_coef * (temp[t] - 20.0))
                * (1.0 + s.rh_coef * (rh[t] - 50.0) / 50.0);
            let prev = state.unwrap_or(response);
            let lagged = prev + s.lag * (response - prev);
            state = Some(lagged);
            channels[t * channels_n + k] = lagged + c.noise_scale * s.noise * normal();
        }
    }
    let mut ec_state = None;
    for t in 0..n {
        let response = 0.85 * ozone[t] + 0.9 * (temp[t] - 20.0) - 0.05 * (rh[t] - 50.0) + 8.0;
        let prev = ec_state.unwrap_or(response);
        let lagged = prev + 0.7 * (response - prev);
        ec_state = Some(lagged);
        channels[t * channels_n + 4] = lagged + c.noise_scale * 6.0 * normal();
        channels[t * channels_n + 5] = temp[t] + c.noise_scale * 0.2 * normal();
        channels[t * channels_n + 6] = rh[t] + c.noise_scale * 0.8 * normal();
    }

    RawSeries::new(
        timestamps,
        CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        channels,
        ozone,
    )
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Fractions of the series assigned to train, validation and test.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Cuts the series into a chronological prefix, middle and suffix.
///
/// Boundaries are `floor(f_train·N)` and `floor((f_train+f_val)·N)`. Every
/// part must hold at least one window.
pub fn chrono_split(
    series: &RawSeries,
    fractions: (f64, f64, f64),
    window_len: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let (a, b, c) = fractions;
    if ![a, b, c].iter().all(|f| f.is_finite() && *f > 0.0) || libm::fabs(a + b + c - 1.0) > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = series.len();
    // The small offset keeps products such as 0.7·10 from landing just
    // below an integer.
    let first = libm::floor(a * n as f64 + 1e-9) as usize;
    let second = libm::floor((a + b) * n as f64 + 1e-9) as usize;
    for (split, len) in [("train", first), ("validation", second - first), ("test", n - second)] {
        if len < window_len {
            return Err(Error::SplitTooShort {
                split,
                len,
                window: window_len,
            });
        }
    }
    Ok((series.slice(0, first)?, series.slice(first, second)?, series.slice(second, n)?))
}

/// Per-channel and target minimum and maximum of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub channel_names: Vec<String>,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
    pub target_min: f64,
    pub target_max: f64,
}

impl ScalerParams {
    /// Fits on `train`. A constant channel (or target) cannot be scaled and
    /// is reported by name.
    pub fn fit(train: &RawSeries) -> Result<Self> {
        let mut channel_min = Vec::with_capacity(train.num_channels());
        let mut channel_max = Vec::with_capacity(train.num_channels());
        for (c, name) in train.channel_names().iter().enumerate() {
            let (lo, hi) = min_max(train.channel(c));
            if hi <= lo {
                return Err(Error::ConstantChannel(name.clone()));
            }
            channel_min.push(lo);
            channel_max.push(hi);
        }
        let (target_min, target_max) = min_max(train.target().iter().copied());
        if target_max <= target_min {
            return Err(Error::ConstantChannel(TARGET_NAME.to_string()));
        }
        Ok(Self {
            channel_names: train.channel_names().to_vec(),
            channel_min,
            channel_max,
            target_min,
            target_max,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn scale_channel(&self, c: usize, x: f64) -> f64 {
        (x - self.channel_min[c]) / (self.channel_max[c] - self.channel_min[c])
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_min) / (self.target_max - self.target_min)
    }

    pub fn invert_channel(&self, c: usize, s: f64) -> f64 {
        s * (self.channel_max[c] - self.channel_min[c]) + self.channel_min[c]
    }

    pub fn invert_target(&self, s: f64) -> f64 {
        s * (self.target_max - self.target_min) + self.target_min
    }

    /// Scales every channel and the target. Values outside the training
    /// range map outside `[0, 1]` and are kept as they are.
    pub fn apply(&self, series: &RawSeries) -> Result<RawSeries> {
        if series.channel_names() != self.channel_names.as_slice() {
            return Err(Error::InvalidConfig(format!(
                "series channels {:?} do not match scaler channels {:?}",
                series.channel_names(),
                self.channel_names
            )));
        }
        let c = self.num_channels();
        let mut out = series.clone();
        for (i, v) in out.channels.iter_mut().enumerate() {
            *v = self.scale_channel(i % c, *v);
        }
        for v in &mut out.target {
            *v = self.scale_target(*v);
        }
        Ok(out)
    }

    /// Inverse of [`ScalerParams::apply`].
    pub fn invert(&self, series: &RawSeries) -> Result<RawSeries> {
        if series.channel_names() != self.channel_names.as_slice() {
            return Err(invalid("scaler", "channel names differ"));
        }
        let c = self.num_channels();
        let mut out = series.clone();
        for (i, v) in out.channels.iter_mut().enumerate() {
            *v = self.invert_channel(i % c, *v);
        }
        for v in &mut out.target {
            *v = self.invert_target(*v);
        }
        Ok(out)
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Sliding windows over one split with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    /// `(num_windows, window_len, channels)`
    pub windows: Tensor,
    /// `(num_windows)`: the target at each window's last step.
    pub targets: Tensor,
    /// Index of each window's first step in the original series.
    pub provenance: Vec<usize>,
}

/// Number of windows of length `window` at `stride` over `len` steps.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Builds every window `[k·stride, k·stride + window_len)` of `split`.
pub fn make_windows(split: &RawSeries, window_len: usize, stride: usize) -> Result<WindowedDataset> {
    if window_len == 0 || stride == 0 {
        return Err(invalid("windows", "window length and stride must be at least 1"));
    }
    if split.len() < window_len {
        return Err(Error::SplitTooShort {
            split: "windowed",
            len: split.len(),
            window: window_len,
        });
    }
    let count = window_count(split.len(), window_len, stride);
    let c = split.num_channels();
    let mut windows = Vec::with_capacity(count * window_len * c);
    let mut targets = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride;
        windows.extend_from_slice(&split.channels()[start * c..(start + window_len) * c]);
        targets.push(split.target()[start + window_len - 1]);
        provenance.push(split.origin() + start);
    }
    Ok(WindowedDataset {
        windows: Tensor::new(vec![count, window_len, c], windows)?,
        targets: Tensor::new(vec![count], targets)?,
        provenance,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Windows and targets at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(invalid("batch", "empty batch"));
        }
        let stride = self.window_len() * self.num_channels();
        let mut x = Vec::with_capacity(indices.len() * stride);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid("batch", format!("window {i} out of range")));
            }
            x.extend_from_slice(&self.windows.data()[i * stride..(i + 1) * stride]);
            y.push(self.targets.data()[i]);
        }
        Ok((
            Tensor::from_parts(vec![indices.len(), self.window_len(), self.num_channels()], x),
            Tensor::from_parts(vec![indices.len()], y),
        ))
    }

    /// The windows at `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (windows, targets) = self.batch(indices)?;
        Ok(Self {
            windows,
            targets,
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        })
    }
}

//! Shared fixtures for the benchmarks.

use freqcal_core::{ForecasterModel, TimeSeriesDataset};
use ndarray::{Array2, Array3};

/// Deterministic pseudo-noise in `[-1, 1)`.
fn jitter(i: usize) -> f64 {
    let x = (i as f64 * 12.9898).sin() * 43_758.545_3;
    2.0 * (x - x.floor()) - 1.0
}

/// Two daily cycles plus a weekly one, hourly sampling.
pub fn hourly_dataset(rows: usize, channels: usize) -> TimeSeriesDataset {
    let raw = Array2::from_shape_fn((rows, channels), |(t, c)| {
        let day = 2.0 * std::f64::consts::PI * t as f64 / 24.0;
        (day + c as f64).sin() + 0.5 * (day / 7.0).cos() + 0.1 * jitter(t * 31 + c)
    });
    let names = (0..channels).map(|c| format!("ch{c}")).collect();
    TimeSeriesDataset::from_raw("bench", names, raw).expect("valid synthetic series")
}

/// `[n × len × channels]` tensor of deterministic values.
pub fn tensor(n: usize, len: usize, channels: usize) -> Array3<f64> {
    Array3::from_shape_fn((n, len, channels), |(i, t, c)| jitter(i * 7919 + t * 104_729 + c))
}

pub fn linear_forecaster(lookback: usize, horizon: usize, channels: usize) -> ForecasterModel {
    let w = Array3::from_shape_fn((channels, horizon, lookback), |(c, h, l)| 0.05 * jitter(c * 65_537 + h * 257 + l));
    ForecasterModel::linear(w, Array2::zeros((channels, horizon))).expect("consistent shapes")
}

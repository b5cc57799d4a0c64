#![allow(dead_code)]

use freqcal_core::adapter::{adapter_backward, adapter_forward, AdapterConfig, AdapterKind, AdapterState};
use freqcal_core::forecaster::{ForecasterModel, ForecasterWeights};
use freqcal_core::protocol::{BatchRecord, ProtocolMode};
use freqcal_core::{RunTrace, TimeSeriesDataset};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::f64::consts::PI;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
}

/// Noisy multi-seasonal series, `rows × channels`.
pub fn seasonal_dataset(rows: usize, channels: usize, period: usize, seed: u64) -> TimeSeriesDataset {
    let mut r = rng(seed);
    let raw = Array2::from_shape_fn((rows, channels), |(t, c)| {
        let w = 2.0 * PI * t as f64 / period as f64;
        (w + c as f64).sin() + 0.4 * (3.0 * w).cos() + 0.002 * t as f64 + 0.1 * r.random_range(-1.0..1.0)
    });
    let names = (0..channels).map(|c| format!("ch{c}")).collect();
    TimeSeriesDataset::from_raw("synthetic", names, raw).unwrap()
}

pub fn random_linear(rng: &mut ChaCha8Rng, lookback: usize, horizon: usize, channels: usize) -> ForecasterModel {
    let w = Array3::from_shape_fn((channels, horizon, lookback), |_| rng.random_range(-0.3..0.3));
    let b = Array2::from_shape_fn((channels, horizon), |_| rng.random_range(-0.1..0.1));
    ForecasterModel::linear(w, b).unwrap()
}

pub fn random_dlinear(rng: &mut ChaCha8Rng, lookback: usize, horizon: usize, channels: usize) -> ForecasterModel {
    let w = |rng: &mut ChaCha8Rng| Array3::from_shape_fn((channels, horizon, lookback), |_| rng.random_range(-0.3..0.3));
    let b = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((channels, horizon), |_| rng.random_range(-0.1..0.1));
    ForecasterModel {
        lookback,
        horizon,
        channels,
        train_loss: None,
        weights: ForecasterWeights::Dlinear {
            kernel: 3,
            seasonal_weight: w(rng),
            seasonal_bias: b(rng),
            trend_weight: w(rng),
            trend_bias: b(rng),
        },
    }
}

/// An adapter with every parameter drawn at random.
pub fn random_adapter(
    rng: &mut ChaCha8Rng,
    kind: AdapterKind,
    use_input: bool,
    channels: usize,
    lookback: usize,
    horizon: usize,
    scale: f64,
) -> AdapterState {
    let cfg = AdapterConfig {
        kind,
        use_input_calibration: use_input,
        gate_init: 0.0,
    };
    let mut s = AdapterState::new(cfg, channels, lookback, horizon);
    let p: Vec<f64> = (0..s.param_count()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    s.set_parameters(&p).unwrap();
    s
}

const FD_STEP: f64 = 1e-5;

fn cotangent_loss(state: &AdapterState, model: &ForecasterModel, x: &Array3<f64>, cot: &Array3<f64>) -> f64 {
    let (y, _) = adapter_forward(state, model, x).unwrap();
    (&y * cot).sum()
}

/// Largest relative error between the analytic gradient and central
/// differences over every adapter parameter, and the number of parameters
/// probed. The denominator is floored at 1% of the largest numeric entry so
/// that structurally zero gradients (imaginary DC/Nyquist coefficients)
/// compare on an absolute scale.
pub fn gradient_error(state: &AdapterState, model: &ForecasterModel, x: &Array3<f64>, cot: &Array3<f64>) -> (f64, usize) {
    let (_, tape) = adapter_forward(state, model, x).unwrap();
    let analytic = adapter_backward(state, model, &tape, cot).unwrap().flatten();
    let base = state.parameters();
    let mut probe = state.clone();
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + FD_STEP;
            probe.set_parameters(&p).unwrap();
            let up = cotangent_loss(&probe, model, x, cot);
            p[i] = base[i] - FD_STEP;
            probe.set_parameters(&p).unwrap();
            let down = cotangent_loss(&probe, model, x, cot);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2 * scale))
        .fold(0.0f64, f64::max);
    (worst, base.len())
}

/// Window/channel average of `|Σ_t Δ[t]·e^{−2πift/H}|` for `f = 1..=H/2`.
pub fn naive_spectrum(pre: &Array3<f64>, post: &Array3<f64>) -> Vec<f64> {
    let (n, h, c) = pre.dim();
    (1..=h / 2)
        .map(|f| {
            let mut acc = 0.0;
            for w in 0..n {
                for ch in 0..c {
                    let (mut re, mut im) = (0.0, 0.0);
                    for t in 0..h {
                        let d = post[[w, t, ch]] - pre[[w, t, ch]];
                        let ang = -2.0 * PI * (f * t) as f64 / h as f64;
                        re += d * ang.cos();
                        im += d * ang.sin();
                    }
                    acc += (re * re + im * im).sqrt();
                }
            }
            acc / (n * c) as f64
        })
        .collect()
}

pub fn batch_record(index: usize, anchor: usize, size: usize) -> BatchRecord {
    BatchRecord {
        index,
        anchor,
        size,
        matured_count: 0,
        selected: Vec::new(),
        updates: Vec::new(),
        adaptation_secs: 0.0,
        forecaster_secs: 0.0,
    }
}

pub const TOY_HORIZON: usize = 5;

/// Batches of sizes 3, 2, 3 with horizon 5 and one channel. Targets are read
/// from a row-indexed series, which is returned alongside.
pub fn toy_trace() -> (RunTrace, HashMap<usize, f64>) {
    let h = TOY_HORIZON;
    let sizes = [3, 2, 3];
    let series: HashMap<usize, f64> = (0..40).map(|t| (t, ((t * 7) % 5) as f64 - 2.0)).collect();
    let n: usize = sizes.iter().sum();
    let mut trace = RunTrace {
        horizon: h,
        channels: 1,
        lookback: 4,
        mode: ProtocolMode::MixedSupervision,
        ..Default::default()
    };
    let mut targets = Array3::zeros((n, h, 1));
    let mut anchor = 9;
    let mut w = 0;
    for (k, &b) in sizes.iter().enumerate() {
        trace.batches.push(batch_record(k, anchor, b));
        for j in 0..b {
            for t in 0..h {
                targets[[w, t, 0]] = series[&(anchor + 1 + j + t)];
            }
            w += 1;
        }
        anchor += b;
    }
    trace.pre = Array3::from_shape_fn((n, h, 1), |(w, t, _)| (w as f64 * 0.37 + t as f64 * 0.11).sin());
    trace.final_predictions = Array3::from_shape_fn((n, h, 1), |(w, t, _)| (w as f64 * 0.21 - t as f64 * 0.13).cos());
    trace.post = trace.final_predictions.clone();
    trace.frozen = trace.pre.clone();
    trace.targets = targets;
    (trace, series)
}

/// Early-vs-late curves of [`toy_trace`] for batch size 3, enumerated over
/// absolute rows: batches with anchors 9 and 14 (first windows 0 and 5), rows
/// `anchor+3 ..= anchor+5`.
pub fn toy_early_late(trace: &RunTrace, series: &HashMap<usize, f64>) -> (Vec<f64>, Vec<f64>) {
    let b = 3;
    let mut direct = vec![0.0; b];
    let mut adjusted = vec![0.0; b];
    for (anchor, first_row) in [(9usize, 0usize), (14, 5)] {
        for j in 1..=b {
            let (mut sd, mut sa, mut cnt) = (0.0, 0.0, 0.0);
            for t in anchor + b..=anchor + TOY_HORIZON {
                let step = t - (anchor + j);
                let y = series[&t];
                sd += (trace.pre[[first_row + j - 1, step, 0]] - y).powi(2);
                sa += (trace.final_predictions[[first_row + j - 1, step, 0]] - y).powi(2);
                cnt += 1.0;
            }
            direct[j - 1] += sd / cnt / 2.0;
            adjusted[j - 1] += sa / cnt / 2.0;
        }
    }
    (direct, adjusted)
}

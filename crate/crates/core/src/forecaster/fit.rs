use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, ArrayViewMut3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{moving_average_matrix, ForecasterModel, ForecasterWeights};
use crate::data::{Region, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::metrics::mse;
use crate::optim::{adam_step, AdamConfig, AdamState, StepOutcome};

pub const DEFAULT_RIDGE: f64 = 1e-4;

/// Per-channel ridge least squares from look-back to horizon, with an
/// unpenalized intercept, fitted on every train-region window.
pub fn fit_ols(
    ds: &TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
    ridge: f64,
) -> Result<ForecasterModel> {
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let (inputs, targets) = ds.windows(Region::Train, lookback, horizon);
    let n = inputs.dim().0;
    if n == 0 {
        return Err(Error::TooShort {
            rows: ds.split.train_end,
            needed: lookback + horizon,
        });
    }
    let channels = ds.channels();
    let mut weight = Array3::zeros((channels, horizon, lookback));
    let mut bias = Array2::zeros((channels, horizon));
    for c in 0..channels {
        let x = inputs.slice(s![.., .., c]);
        let y = targets.slice(s![.., .., c]);
        let (w, b) = solve_ridge(x, y, ridge)?;
        weight.index_axis_mut(Axis(0), c).assign(&w);
        bias.row_mut(c).assign(&b);
    }
    let mut model = ForecasterModel::linear(weight, bias)?;
    model.train_loss = Some(mse(&model.forward(&inputs)?, &targets));
    Ok(model)
}

/// Solves `min ‖[X 1]β − Y‖² + ridge·‖β_X‖²`; returns (`[H × L]`, `[H]`).
fn solve_ridge(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    ridge: f64,
) -> Result<(Array2<f64>, ndarray::Array1<f64>)> {
    let (n, l) = x.dim();
    let h = y.ncols();
    let mut aug = Array2::ones((n, l + 1));
    aug.slice_mut(s![.., ..l]).assign(&x);
    let mut gram = aug.t().dot(&aug);
    for i in 0..l {
        gram[[i, i]] += ridge;
    }
    let rhs = aug.t().dot(&y);

    let gram = DMatrix::from_fn(l + 1, l + 1, |i, j| gram[[i, j]]);
    let chol = gram.cholesky().ok_or_else(singular)?;
    if ridge == 0.0 {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
        if lo * lo < 1e-13 * hi * hi {
            return Err(singular());
        }
    }
    let mut w = Array2::zeros((h, l));
    let mut b = ndarray::Array1::zeros(h);
    for k in 0..h {
        let col = DVector::from_iterator(l + 1, rhs.column(k).iter().copied());
        let beta = chol.solve(&col);
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(singular());
        }
        for i in 0..l {
            w[[k, i]] = beta[i];
        }
        b[k] = beta[l];
    }
    Ok((w, b))
}

fn singular() -> Error {
    Error::Numerical("normal matrix is singular; use a ridge penalty > 0".into())
}

/// Training settings for [`fit_dlinear`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DLinearConfig {
    /// Odd moving-average kernel size.
    pub kernel: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DLinearConfig {
    fn default() -> Self {
        DLinearConfig {
            kernel: 25,
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            patience: 3,
            seed: 2024,
        }
    }
}

/// Flat parameter layout: seasonal weight, seasonal bias, trend weight, trend bias.
struct DLinearParams {
    channels: usize,
    horizon: usize,
    lookback: usize,
}

impl DLinearParams {
    fn weight_len(&self) -> usize {
        self.channels * self.horizon * self.lookback
    }

    fn bias_len(&self) -> usize {
        self.channels * self.horizon
    }

    fn len(&self) -> usize {
        2 * (self.weight_len() + self.bias_len())
    }

    #[allow(clippy::type_complexity)]
    fn split_mut<'a>(
        &self,
        flat: &'a mut [f64],
    ) -> (
        ArrayViewMut3<'a, f64>,
        ArrayViewMut2<'a, f64>,
        ArrayViewMut3<'a, f64>,
        ArrayViewMut2<'a, f64>,
    ) {
        let (wl, bl) = (self.weight_len(), self.bias_len());
        let (sw, rest) = flat.split_at_mut(wl);
        let (sb, rest) = rest.split_at_mut(bl);
        let (tw, tb) = rest.split_at_mut(wl);
        let wdim = (self.channels, self.horizon, self.lookback);
        let bdim = (self.channels, self.horizon);
        (
            ArrayViewMut3::from_shape(wdim, sw).expect("layout"),
            ArrayViewMut2::from_shape(bdim, sb).expect("layout"),
            ArrayViewMut3::from_shape(wdim, tw).expect("layout"),
            ArrayViewMut2::from_shape(bdim, tb).expect("layout"),
        )
    }

    fn to_model(&self, flat: &[f64], kernel: usize) -> ForecasterModel {
        let mut owned = flat.to_vec();
        let (sw, sb, tw, tb) = self.split_mut(&mut owned);
        ForecasterModel {
            lookback: self.lookback,
            horizon: self.horizon,
            channels: self.channels,
            train_loss: None,
            weights: ForecasterWeights::Dlinear {
                kernel,
                seasonal_weight: sw.to_owned(),
                seasonal_bias: sb.to_owned(),
                trend_weight: tw.to_owned(),
                trend_bias: tb.to_owned(),
            },
        }
    }
}

/// Seasonal/trend decomposition model trained with mini-batch Adam on the
/// train windows and early-stopped on validation MSE.
///
/// Weights start at `1/L` (a plain average of the look-back) and biases at 0.
pub fn fit_dlinear(
    ds: &TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
    config: &DLinearConfig,
) -> Result<ForecasterModel> {
    if config.kernel == 0 || config.kernel % 2 == 0 {
        return Err(Error::Config(format!(
            "moving-average kernel must be odd and positive, got {}",
            config.kernel
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let (inputs, targets) = ds.windows(Region::Train, lookback, horizon);
    let n = inputs.dim().0;
    if n == 0 {
        return Err(Error::TooShort {
            rows: ds.split.train_end,
            needed: lookback + horizon,
        });
    }
    let (val_inputs, val_targets) = ds.windows(Region::Val, lookback, horizon);
    let channels = ds.channels();
    let layout = DLinearParams {
        channels,
        horizon,
        lookback,
    };
    let avg = moving_average_matrix(lookback, config.kernel);

    let mut params = vec![0.0; layout.len()];
    {
        let (mut sw, _, mut tw, _) = layout.split_mut(&mut params);
        sw.fill(1.0 / lookback as f64);
        tw.fill(1.0 / lookback as f64);
    }
    let mut grads = vec![0.0; layout.len()];
    let mut state = AdamState::new(layout.len());
    let hyper = AdamConfig::with_lr(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let xb = inputs.select(Axis(0), chunk);
            let yb = targets.select(Axis(0), chunk);
            let model = layout.to_model(&params, config.kernel);
            let pred = model.forward(&xb)?;
            let scale = 2.0 / pred.len() as f64;
            let resid = (&pred - &yb) * scale;

            grads.iter_mut().for_each(|g| *g = 0.0);
            let (mut gsw, mut gsb, mut gtw, mut gtb) = layout.split_mut(&mut grads);
            for c in 0..channels {
                let x = xb.slice(s![.., .., c]);
                let trend = x.dot(&avg.t());
                let seasonal = &x - &trend;
                let g = resid.slice(s![.., .., c]);
                gsw.index_axis_mut(Axis(0), c).assign(&g.t().dot(&seasonal));
                gtw.index_axis_mut(Axis(0), c).assign(&g.t().dot(&trend));
                let gb = g.sum_axis(Axis(0));
                gsb.row_mut(c).assign(&gb);
                gtb.row_mut(c).assign(&gb);
            }
            if adam_step(&mut params, &grads, &mut state, &hyper)? == StepOutcome::SkippedNonFinite {
                return Err(Error::Training(format!("non-finite gradient in epoch {epoch}")));
            }
        }

        let model = layout.to_model(&params, config.kernel);
        let monitor = if val_inputs.dim().0 > 0 {
            mse(&model.forward(&val_inputs)?, &val_targets)
        } else {
            mse(&model.forward(&inputs)?, &targets)
        };
        if !monitor.is_finite() {
            return Err(Error::Training(format!("loss is {monitor} after epoch {epoch}")));
        }
        log::debug!("dlinear epoch {epoch}: monitored mse {monitor:.6}");
        match &best {
            Some((b, _)) if monitor >= *b => {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((monitor, params.clone()));
                stale = 0;
            }
        }
    }

    let final_params = best.map(|(_, p)| p).unwrap_or(params);
    let mut model = layout.to_model(&final_params, config.kernel);
    model.train_loss = Some(mse(&model.forward(&inputs)?, &targets));
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ForecasterKind;

    fn dataset(rows: usize, f: impl Fn(usize, usize) -> f64, channels: usize) -> TimeSeriesDataset {
        let raw = Array2::from_shape_fn((rows, channels), |(t, c)| f(t, c));
        let names = (0..channels).map(|c| format!("c{c}")).collect();
        TimeSeriesDataset::from_raw("synthetic", names, raw).unwrap()
    }

    #[test]
    fn ols_recovers_noiseless_linear_recurrence() {
        // Two sinusoids satisfy an order-4 linear recurrence, so every future
        // value is an exact affine function of the look-back.
        let ds = dataset(
            600,
            |t, c| (0.3 * t as f64).sin() + 0.5 * (0.7 * t as f64 + 1.0 + c as f64).cos(),
            2,
        );
        let model = fit_ols(&ds, 12, 5, 1e-10).unwrap();
        assert!(model.train_loss.unwrap() < 1e-8, "{:?}", model.train_loss);
        assert!(model.mse_on(&ds, Region::Test).unwrap() < 1e-8);
    }

    #[test]
    fn large_ridge_shrinks_to_target_mean() {
        let ds = dataset(20, |t, _| ((t * 5) % 7) as f64, 1);
        // L = 10, H = 4 leaves exactly one train window ending at row 14.
        let (x, y) = ds.windows(Region::Train, 10, 4);
        assert_eq!(x.dim().0, 1);
        let model = fit_ols(&ds, 10, 4, 1e12).unwrap();
        let ForecasterWeights::Ols { weight, bias } = &model.weights else {
            panic!()
        };
        assert!(weight.iter().all(|w| w.abs() < 1e-9));
        for h in 0..4 {
            assert!((bias[[0, h]] - y[[0, h, 0]]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_ridge_on_collinear_lookback_fails() {
        // A constant-slope ramp makes every look-back an affine function of one
        // scalar, so the augmented normal matrix is rank 2.
        let ds = dataset(200, |t, _| t as f64, 1);
        let err = fit_ols(&ds, 6, 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("ridge")));
        assert!(fit_ols(&ds, 6, 2, DEFAULT_RIDGE).is_ok());
    }

    #[test]
    fn even_kernel_rejected() {
        let ds = dataset(200, |t, _| (t as f64 * 0.1).sin(), 1);
        let cfg = DLinearConfig {
            kernel: 4,
            ..Default::default()
        };
        assert!(matches!(fit_dlinear(&ds, 8, 4, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_one_reduces_to_single_linear_map() {
        let ds = dataset(
            1500,
            |t, c| (0.21 * t as f64).sin() + 0.3 * (0.05 * t as f64 + c as f64).cos(),
            1,
        );
        let cfg = DLinearConfig {
            kernel: 1,
            epochs: 60,
            lr: 1e-2,
            patience: 60,
            ..Default::default()
        };
        let dl = fit_dlinear(&ds, 16, 4, &cfg).unwrap();
        assert_eq!(dl.kind(), ForecasterKind::Dlinear);
        let ForecasterWeights::Dlinear { seasonal_weight, .. } = &dl.weights else {
            panic!()
        };
        // Seasonal branch sees x − x = 0 and never receives gradient.
        assert!(seasonal_weight.iter().all(|w| (*w - 1.0 / 16.0).abs() < 1e-15));
        let ols = fit_ols(&ds, 16, 4, DEFAULT_RIDGE).unwrap();
        let (x, _) = ds.windows(Region::Test, 16, 4);
        let a = dl.forward(&x).unwrap();
        let b = ols.forward(&x).unwrap();
        let gap = mse(&a, &b) / mse(&b, &Array3::zeros(b.dim()));
        assert!(gap < 1e-2, "dlinear/ols relative prediction gap {gap}");
    }

    #[test]
    fn ramp_is_carried_by_the_trend_branch() {
        let ds = dataset(2000, |t, _| 0.01 * t as f64 + 0.002 * ((t % 13) as f64), 1);
        let cfg = DLinearConfig {
            kernel: 5,
            epochs: 20,
            lr: 5e-3,
            patience: 20,
            ..Default::default()
        };
        let model = fit_dlinear(&ds, 24, 6, &cfg).unwrap();
        let ForecasterWeights::Dlinear {
            kernel,
            seasonal_weight,
            trend_weight,
            ..
        } = &model.weights
        else {
            panic!()
        };
        let avg = moving_average_matrix(24, *kernel);
        let (x, _) = ds.windows(Region::Test, 24, 6);
        let xs: Array2<f64> = x.slice(s![.., .., 0]).to_owned();
        let trend: Array2<f64> = xs.dot(&avg.t());
        let seasonal: Array2<f64> = &xs - &trend;
        let seasonal_out = seasonal.dot(&seasonal_weight.index_axis(Axis(0), 0).t());
        let trend_out = trend.dot(&trend_weight.index_axis(Axis(0), 0).t());
        let total = &seasonal_out + &trend_out;
        let ratio = seasonal_out.mapv(|v| v * v).sum().sqrt() / total.mapv(|v| v * v).sum().sqrt();
        assert!(ratio < 0.1, "seasonal share {ratio}");
    }

    #[test]
    fn constant_input_gives_constant_forecast() {
        // Long plateaus at varying levels: nearly every window is flat.
        let ds = dataset(4000, |t, _| ((t / 400) * 37 % 11) as f64, 1);
        let cfg = DLinearConfig {
            kernel: 5,
            epochs: 5,
            ..Default::default()
        };
        let model = fit_dlinear(&ds, 16, 4, &cfg).unwrap();
        for level in [-1.0, 0.3, 1.2] {
            let y = model.forward(&Array3::from_elem((1, 16, 1), level)).unwrap();
            // Plateau jumps make the least-squares map slightly shrink toward the mean.
            for v in y.iter() {
                assert!((v - level).abs() < 5e-2, "level {level}: {v}");
            }
        }
    }
}

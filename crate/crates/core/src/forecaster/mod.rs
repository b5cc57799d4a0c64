//! Frozen, channel-independent linear source forecasters.
//!
//! Every model maps a `[B × L × C]` look-back tensor to a `[B × H × C]`
//! forecast and exposes its vector-Jacobian product so calibration gradients
//! can flow through it to an input-side module. All kinds are affine in the
//! input, so the VJP does not depend on the point it is taken at.

mod blob;
mod fit;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Region, TimeSeriesDataset};
use crate::error::{Error, Result};

pub use blob::{ArrayBlob, ModelBlob, MODEL_FORMAT, MODEL_VERSION};
pub use fit::{fit_dlinear, fit_ols, DLinearConfig, DEFAULT_RIDGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    Ols,
    Dlinear,
    Naive,
}

impl std::fmt::Display for ForecasterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForecasterKind::Ols => "ols",
            ForecasterKind::Dlinear => "dlinear",
            ForecasterKind::Naive => "naive",
        })
    }
}

impl std::str::FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(ForecasterKind::Ols),
            "dlinear" => Ok(ForecasterKind::Dlinear),
            "naive" => Ok(ForecasterKind::Naive),
            other => Err(Error::Config(format!("unknown forecaster kind `{other}`"))),
        }
    }
}

/// Per-kind parameter block. Weight tensors are `[C × H × L]` (output rows,
/// input columns) and biases `[C × H]`.
#[derive(Debug, Clone, PartialEq)]
pub enum ForecasterWeights {
    Naive,
    Ols {
        weight: Array3<f64>,
        bias: Array2<f64>,
    },
    Dlinear {
        kernel: usize,
        seasonal_weight: Array3<f64>,
        seasonal_bias: Array2<f64>,
        trend_weight: Array3<f64>,
        trend_bias: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterModel {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// MSE on the train windows, when the model was fitted on a dataset.
    pub train_loss: Option<f64>,
    pub weights: ForecasterWeights,
}

impl ForecasterModel {
    /// Persistence forecast: every horizon step repeats the last observation.
    pub fn naive(lookback: usize, horizon: usize, channels: usize) -> Self {
        ForecasterModel {
            lookback,
            horizon,
            channels,
            train_loss: None,
            weights: ForecasterWeights::Naive,
        }
    }

    /// An OLS-kind model with explicit weights `[C × H × L]` and bias `[C × H]`.
    pub fn linear(weight: Array3<f64>, bias: Array2<f64>) -> Result<Self> {
        let (c, h, l) = weight.dim();
        if bias.dim() != (c, h) {
            return Err(Error::Shape(format!(
                "bias {:?} does not match weight {:?}",
                bias.dim(),
                weight.dim()
            )));
        }
        Ok(ForecasterModel {
            lookback: l,
            horizon: h,
            channels: c,
            train_loss: None,
            weights: ForecasterWeights::Ols { weight, bias },
        })
    }

    pub fn kind(&self) -> ForecasterKind {
        match self.weights {
            ForecasterWeights::Naive => ForecasterKind::Naive,
            ForecasterWeights::Ols { .. } => ForecasterKind::Ols,
            ForecasterWeights::Dlinear { .. } => ForecasterKind::Dlinear,
        }
    }

    fn check_input(&self, inputs: &Array3<f64>) -> Result<()> {
        let (_, l, c) = inputs.dim();
        if l != self.lookback || c != self.channels {
            return Err(Error::Shape(format!(
                "forecaster expects [B × {} × {}], got {:?}",
                self.lookback,
                self.channels,
                inputs.dim()
            )));
        }
        Ok(())
    }

    /// `[B × L × C] → [B × H × C]`.
    pub fn forward(&self, inputs: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_input(inputs)?;
        let batch = inputs.dim().0;
        let mut out = Array3::zeros((batch, self.horizon, self.channels));
        match &self.weights {
            ForecasterWeights::Naive => {
                let last = inputs.index_axis(Axis(1), self.lookback - 1);
                for h in 0..self.horizon {
                    out.index_axis_mut(Axis(1), h).assign(&last);
                }
            }
            ForecasterWeights::Ols { weight, bias } => {
                for c in 0..self.channels {
                    let x = inputs.slice(s![.., .., c]);
                    let mut y = x.dot(&weight.index_axis(Axis(0), c).t());
                    y += &bias.row(c);
                    out.slice_mut(s![.., .., c]).assign(&y);
                }
            }
            ForecasterWeights::Dlinear {
                kernel,
                seasonal_weight,
                seasonal_bias,
                trend_weight,
                trend_bias,
            } => {
                let avg = moving_average_matrix(self.lookback, *kernel);
                for c in 0..self.channels {
                    let x = inputs.slice(s![.., .., c]);
                    let trend = x.dot(&avg.t());
                    let seasonal = &x - &trend;
                    let mut y = seasonal.dot(&seasonal_weight.index_axis(Axis(0), c).t())
                        + trend.dot(&trend_weight.index_axis(Axis(0), c).t());
                    y += &seasonal_bias.row(c);
                    y += &trend_bias.row(c);
                    out.slice_mut(s![.., .., c]).assign(&y);
                }
            }
        }
        Ok(out)
    }

    /// `∂⟨forward(inputs), grad_out⟩/∂inputs`.
    pub fn vjp(&self, inputs: &Array3<f64>, grad_out: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_input(inputs)?;
        let batch = inputs.dim().0;
        if grad_out.dim() != (batch, self.horizon, self.channels) {
            return Err(Error::Shape(format!(
                "grad_out {:?}, expected [{batch} × {} × {}]",
                grad_out.dim(),
                self.horizon,
                self.channels
            )));
        }
        let mut out = Array3::zeros(inputs.dim());
        match &self.weights {
            ForecasterWeights::Naive => {
                let total = grad_out.sum_axis(Axis(1));
                out.index_axis_mut(Axis(1), self.lookback - 1).assign(&total);
            }
            ForecasterWeights::Ols { weight, .. } => {
                for c in 0..self.channels {
                    let g = grad_out.slice(s![.., .., c]);
                    out.slice_mut(s![.., .., c])
                        .assign(&g.dot(&weight.index_axis(Axis(0), c)));
                }
            }
            ForecasterWeights::Dlinear {
                kernel,
                seasonal_weight,
                trend_weight,
                ..
            } => {
                let avg = moving_average_matrix(self.lookback, *kernel);
                for c in 0..self.channels {
                    let g = grad_out.slice(s![.., .., c]);
                    let gs = g.dot(&seasonal_weight.index_axis(Axis(0), c));
                    let gt = g.dot(&trend_weight.index_axis(Axis(0), c));
                    // seasonal = x − A x, trend = A x
                    let gx = &gs + &(&gt - &gs).dot(&avg);
                    out.slice_mut(s![.., .., c]).assign(&gx);
                }
            }
        }
        Ok(out)
    }

    /// Mean squared error over every window of `region`.
    pub fn mse_on(&self, ds: &TimeSeriesDataset, region: Region) -> Result<f64> {
        let (inputs, targets) = ds.windows(region, self.lookback, self.horizon);
        if inputs.dim().0 == 0 {
            return Err(Error::TooShort {
                rows: ds.len(),
                needed: self.lookback + self.horizon,
            });
        }
        let pred = self.forward(&inputs)?;
        Ok(crate::metrics::mse(&pred, &targets))
    }
}

/// `[L × L]` centered moving average with edge-replicated padding.
///
/// Row `t` averages `x[clamp(t+o, 0, L−1)]` for `o` in `−(k−1)/2 ..= (k−1)/2`.
pub fn moving_average_matrix(len: usize, kernel: usize) -> Array2<f64> {
    let half = (kernel.saturating_sub(1) / 2) as isize;
    let w = 1.0 / kernel as f64;
    let mut a = Array2::zeros((len, len));
    for t in 0..len as isize {
        for o in -half..=half {
            let src = (t + o).clamp(0, len as isize - 1) as usize;
            a[[t as usize, src]] += w;
        }
    }
    a
}

//! Test-time calibration modules placed around a frozen forecaster.
//!
//! The adapted prediction for a look-back batch `X` is
//! `C_out(F(C_in(X)))`, where `F` is the frozen forecaster and each `C` is a
//! gated residual module. The input module is optional (output-only mode).
//! Gradients are exact: output-module parameters through the module's own
//! adjoint, input-module parameters additionally through `F`'s VJP.

mod freq;
mod temporal;

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::ForecasterModel;
use crate::optim::AdamState;
use crate::spectral::num_bins;

pub use freq::{FreqGcmParams, FreqTape};
pub use temporal::{TemporalGcmParams, TemporalTape};

/// Gate pre-activation used by [`AdapterState::new`].
pub const DEFAULT_GATE_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Frequency-domain gated modules.
    Fac,
    /// Dense time-domain gated modules.
    TemporalGcm,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Fac => "fac",
            AdapterKind::TemporalGcm => "temporal_gcm",
        })
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fac" => Ok(AdapterKind::Fac),
            "temporal_gcm" | "temporal" => Ok(AdapterKind::TemporalGcm),
            other => Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// Trainable parameter count of an adapter.
///
/// Frequency modules hold `4·C·(⌊n/2⌋+1) + C` parameters, temporal modules
/// `C·(n² + n + 1)`; the input module has `n = L`, the output module `n = H`.
pub fn param_count(
    kind: AdapterKind,
    channels: usize,
    lookback: usize,
    horizon: usize,
    use_input: bool,
) -> usize {
    let module = |len: usize| match kind {
        AdapterKind::Fac => 4 * channels * num_bins(len) + channels,
        AdapterKind::TemporalGcm => channels * (len * len + len + 1),
    };
    module(horizon) + if use_input { module(lookback) } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub use_input_calibration: bool,
    /// Initial gate pre-activation; mask/shift/matrix/bias always start at 0.
    pub gate_init: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            kind: AdapterKind::Fac,
            use_input_calibration: true,
            gate_init: DEFAULT_GATE_INIT,
        }
    }
}

/// One calibration module of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CalibrationModule {
    Freq(FreqGcmParams),
    Temporal(TemporalGcmParams),
}

#[derive(Debug, Clone)]
pub enum ModuleTape {
    Freq(FreqTape),
    Temporal(TemporalTape),
}

impl CalibrationModule {
    pub fn new(kind: AdapterKind, len: usize, channels: usize, gate: f64) -> Self {
        match kind {
            AdapterKind::Fac => CalibrationModule::Freq(FreqGcmParams::identity(len, channels, gate)),
            AdapterKind::TemporalGcm => {
                CalibrationModule::Temporal(TemporalGcmParams::identity(len, channels, gate))
            }
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            CalibrationModule::Freq(_) => AdapterKind::Fac,
            CalibrationModule::Temporal(_) => AdapterKind::TemporalGcm,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CalibrationModule::Freq(p) => p.len,
            CalibrationModule::Temporal(p) => p.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        match self {
            CalibrationModule::Freq(p) => p.channels(),
            CalibrationModule::Temporal(p) => p.channels(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            CalibrationModule::Freq(p) => p.param_count(),
            CalibrationModule::Temporal(p) => p.param_count(),
        }
    }

    /// A module of the same kind and shape with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        match self {
            CalibrationModule::Freq(p) => {
                CalibrationModule::Freq(FreqGcmParams::zeros(p.len, p.channels()))
            }
            CalibrationModule::Temporal(p) => {
                CalibrationModule::Temporal(TemporalGcmParams::zeros(p.len, p.channels()))
            }
        }
    }

    pub fn gate_mut(&mut self) -> &mut ndarray::Array1<f64> {
        match self {
            CalibrationModule::Freq(p) => &mut p.gate,
            CalibrationModule::Temporal(p) => &mut p.gate,
        }
    }

    pub fn calibrate(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ModuleTape)> {
        match self {
            CalibrationModule::Freq(p) => {
                let (y, t) = p.forward(x)?;
                Ok((y, ModuleTape::Freq(t)))
            }
            CalibrationModule::Temporal(p) => {
                let (y, t) = p.forward(x)?;
                Ok((y, ModuleTape::Temporal(t)))
            }
        }
    }

    pub fn backward(
        &self,
        tape: &ModuleTape,
        grad_out: &Array3<f64>,
        want_input_grad: bool,
    ) -> Result<(CalibrationModule, Option<Array3<f64>>)> {
        match (self, tape) {
            (CalibrationModule::Freq(p), ModuleTape::Freq(t)) => {
                let (g, gi) = p.backward(t, grad_out, want_input_grad)?;
                Ok((CalibrationModule::Freq(g), gi))
            }
            (CalibrationModule::Temporal(p), ModuleTape::Temporal(t)) => {
                let (g, gi) = p.backward(t, grad_out, want_input_grad)?;
                Ok((CalibrationModule::Temporal(g), gi))
            }
            _ => Err(Error::Shape("tape was recorded by a different module kind".into())),
        }
    }

    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        match self {
            CalibrationModule::Freq(p) => p.extend_flat(out),
            CalibrationModule::Temporal(p) => p.extend_flat(out),
        }
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        match self {
            CalibrationModule::Freq(p) => p.load_flat(flat),
            CalibrationModule::Temporal(p) => p.load_flat(flat),
        }
    }
}

/// Adapter parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub config: AdapterConfig,
    /// Absent in output-only mode.
    pub input: Option<CalibrationModule>,
    pub output: CalibrationModule,
    pub optimizer: AdamState,
}

pub const ADAPTER_FORMAT: &str = "freqcal-adapter";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdapterSnapshot {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    state: AdapterState,
}

impl AdapterState {
    /// Identity-initialized adapter for `channels` variables.
    pub fn new(config: AdapterConfig, channels: usize, lookback: usize, horizon: usize) -> Self {
        let input = config
            .use_input_calibration
            .then(|| CalibrationModule::new(config.kind, lookback, channels, config.gate_init));
        let output = CalibrationModule::new(config.kind, horizon, channels, config.gate_init);
        let n = input.as_ref().map_or(0, |m| m.param_count()) + output.param_count();
        AdapterState {
            config,
            input,
            output,
            optimizer: AdamState::new(n),
        }
    }

    /// Every parameter, gates included, set to zero.
    pub fn zeros(config: AdapterConfig, channels: usize, lookback: usize, horizon: usize) -> Self {
        let mut s = Self::new(config, channels, lookback, horizon);
        s.config.gate_init = 0.0;
        if let Some(m) = s.input.as_mut() {
            *m = m.zeros_like();
        }
        s.output = s.output.zeros_like();
        s
    }

    pub fn param_count(&self) -> usize {
        self.input.as_ref().map_or(0, |m| m.param_count()) + self.output.param_count()
    }

    /// Flat parameter vector: input module first (if any), then output module.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        if let Some(m) = &self.input {
            m.extend_flat(&mut out);
        }
        self.output.extend_flat(&mut out);
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "adapter has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut used = 0;
        if let Some(m) = self.input.as_mut() {
            used += m.load_flat(flat)?;
        }
        self.output.load_flat(&flat[used..])?;
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_json_tagged(path, None)
    }

    /// Like [`save_json`](Self::save_json), recording `config_hash` in the snapshot.
    pub fn save_json_tagged(&self, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let snap = AdapterSnapshot {
            format: ADAPTER_FORMAT.into(),
            version: ADAPTER_VERSION,
            config_hash: config_hash.map(str::to_owned),
            state: self.clone(),
        };
        serde_json::to_writer(file, &snap)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let snap: AdapterSnapshot = serde_json::from_reader(file)?;
        if snap.format != ADAPTER_FORMAT || snap.version != ADAPTER_VERSION {
            return Err(Error::Format(format!(
                "adapter snapshot `{}` v{} (supported: {ADAPTER_FORMAT} v{ADAPTER_VERSION})",
                snap.format, snap.version
            )));
        }
        if snap.state.optimizer.len() != snap.state.param_count() {
            return Err(Error::Format("optimizer state does not mirror parameters".into()));
        }
        Ok(snap.state)
    }
}

/// Intermediates of [`adapter_forward`] needed by [`adapter_backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub input_tape: Option<ModuleTape>,
    /// What the forecaster saw: calibrated look-back, or the raw one.
    pub forecaster_input: Array3<f64>,
    /// Raw forecaster output before output calibration.
    pub forecast: Array3<f64>,
    pub output_tape: ModuleTape,
    /// Wall time spent inside the frozen forecaster.
    pub forecaster_time: Duration,
}

/// Parameter gradients, laid out like the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBlock {
    pub input: Option<CalibrationModule>,
    pub output: CalibrationModule,
}

impl GradientBlock {
    /// Same order as [`AdapterState::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(m) = &self.input {
            m.extend_flat(&mut out);
        }
        self.output.extend_flat(&mut out);
        out
    }

    /// `self += weight · other`
    pub fn accumulate(&mut self, other: &GradientBlock, weight: f64) -> Result<()> {
        let mut a = self.flatten();
        let b = other.flatten();
        if a.len() != b.len() {
            return Err(Error::Shape("gradient blocks differ in layout".into()));
        }
        for (x, y) in a.iter_mut().zip(&b) {
            *x += weight * y;
        }
        let mut used = 0;
        if let Some(m) = self.input.as_mut() {
            used += m.load_flat(&a)?;
        }
        self.output.load_flat(&a[used..])?;
        Ok(())
    }
}

/// `C_out(F(C_in(inputs)))` with the tape for the backward pass.
pub fn adapter_forward(
    state: &AdapterState,
    model: &ForecasterModel,
    inputs: &Array3<f64>,
) -> Result<(Array3<f64>, ForwardTape)> {
    let (forecaster_input, input_tape) = match &state.input {
        Some(m) => {
            let (x, t) = m.forward(inputs)?;
            (x, Some(t))
        }
        None => (inputs.clone(), None),
    };
    let start = Instant::now();
    let forecast = model.forward(&forecaster_input)?;
    let forecaster_time = start.elapsed();
    let (prediction, output_tape) = state.output.forward(&forecast)?;
    Ok((
        prediction,
        ForwardTape {
            input_tape,
            forecaster_input,
            forecast,
            output_tape,
            forecaster_time,
        },
    ))
}

/// Exact parameter gradients for `grad_prediction = ∂L/∂prediction`.
pub fn adapter_backward(
    state: &AdapterState,
    model: &ForecasterModel,
    tape: &ForwardTape,
    grad_prediction: &Array3<f64>,
) -> Result<GradientBlock> {
    if tape.input_tape.is_some() != state.input.is_some() {
        return Err(Error::Shape(
            "tape and adapter disagree on the presence of an input module".into(),
        ));
    }
    if grad_prediction.dim() != tape.forecast.dim() {
        return Err(Error::Shape(format!(
            "prediction gradient {:?} does not match forecast {:?}",
            grad_prediction.dim(),
            tape.forecast.dim()
        )));
    }
    let need_forecast_grad = state.input.is_some();
    let (output, grad_forecast) =
        state
            .output
            .backward(&tape.output_tape, grad_prediction, need_forecast_grad)?;
    let input = match (&state.input, &tape.input_tape, grad_forecast) {
        (Some(module), Some(module_tape), Some(gf)) => {
            let gx = model.vjp(&tape.forecaster_input, &gf)?;
            Some(module.backward(module_tape, &gx, false)?.0)
        }
        _ => None,
    };
    Ok(GradientBlock { input, output })
}

//! Test-time calibration of frozen linear forecasters on rolling windows,
//! adapting only on ground truth that has fully matured.
//!
//! The crate is organized bottom-up:
//!
//! * [`data`]: CSV ingestion, chronological splits, z-normalization, rolling batches.
//! * [`spectral`]: one-sided real FFT, its inverse and adjoints, period estimation.
//! * [`forecaster`]: OLS / DLinear / naive source forecasters with VJPs.
//! * [`adapter`]: frequency-domain and dense temporal gated calibration modules.
//! * [`optim`]: Adam.
//! * [`protocol`]: maturation ledger, matured-only and mixed-supervision runs,
//!   leakage audit.
//! * [`diagnostics`]: correction spectra, early-vs-late curves, evaluation reports.

pub mod adapter;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod forecaster;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod spectral;

pub use adapter::{
    adapter_backward, adapter_forward, param_count, AdapterConfig, AdapterKind, AdapterState,
    CalibrationModule, ForwardTape, FreqGcmParams, GradientBlock, TemporalGcmParams,
};
pub use data::{make_rolling_batches, Region, RollingBatch, TimeSeriesDataset};
pub use diagnostics::{correction_spectrum, early_vs_late_curves, evaluate, CorrectionSpectrum, EvalReport};
pub use error::{Error, Result};
pub use forecaster::{fit_dlinear, fit_ols, DLinearConfig, ForecasterKind, ForecasterModel};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use protocol::{
    audit_streaming_leakage, run_matured_only, run_mixed_supervision, run_protocol, LeakageReport,
    MaturationLedger, ProtocolConfig, ProtocolMode, RunTrace,
};
pub use spectral::{estimate_dominant_period, irfft, rfft, rfft_adjoint, OneSidedSpectrum};

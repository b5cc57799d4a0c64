//! Experiment configuration: a TOML or JSON file, overridden by flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use freqcal_core::adapter::{AdapterConfig, AdapterKind, DEFAULT_GATE_INIT};
use freqcal_core::forecaster::DEFAULT_RIDGE;
use freqcal_core::protocol::{BatchRule, MaturedSelection, ProtocolConfig, ProtocolMode};
use freqcal_core::{AdamConfig, DLinearConfig, ForecasterKind};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::UsageError;

/// Serializes through `Display`/`FromStr` so config files read `mode = "matured_only"`.
mod as_str {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: Option<PathBuf>,
    pub timestamp_column: String,
    #[serde(with = "as_str")]
    pub forecaster: ForecasterKind,
    /// Pre-trained forecaster; fitted on the train split when absent.
    pub model: Option<PathBuf>,
    pub ridge: f64,
    pub dlinear: DLinearConfig,
    #[serde(with = "as_str")]
    pub adapter: AdapterKind,
    pub use_input_calibration: bool,
    pub gate_init: f64,
    #[serde(with = "as_str")]
    pub mode: ProtocolMode,
    pub matured_selection: MaturedSelection,
    pub lookback: usize,
    pub horizon: usize,
    #[serde(with = "as_str")]
    pub batch_rule: BatchRule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
    /// Where outputs go. Not part of the hash: it does not affect results.
    #[serde(skip_serializing)]
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        ExperimentConfig {
            data: None,
            timestamp_column: "date".into(),
            forecaster: ForecasterKind::Ols,
            model: None,
            ridge: DEFAULT_RIDGE,
            dlinear: DLinearConfig::default(),
            adapter: AdapterKind::Fac,
            use_input_calibration: true,
            gate_init: DEFAULT_GATE_INIT,
            mode: ProtocolMode::MaturedOnly,
            matured_selection: MaturedSelection::MostRecent,
            lookback: 96,
            horizon: 96,
            batch_rule: BatchRule::Paas,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            steps: 1,
            seed: 2024,
            out: PathBuf::from("out"),
        }
    }
}

/// Flags shared by every experiment command. Each one overrides the
/// matching config-file entry.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML or JSON config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// CSV with a timestamp column followed by numeric channels
    #[arg(long, value_name = "CSV")]
    pub data: Option<PathBuf>,
    /// Name of the timestamp column
    #[arg(long, value_name = "NAME")]
    pub timestamp_column: Option<String>,
    /// Source forecaster: ols, dlinear or naive
    #[arg(long)]
    pub forecaster: Option<ForecasterKind>,
    /// Saved forecaster to use instead of fitting one
    #[arg(long, value_name = "JSON")]
    pub model: Option<PathBuf>,
    /// Calibration adapter: fac or temporal_gcm
    #[arg(long)]
    pub adapter: Option<AdapterKind>,
    /// Protocol: matured_only, mixed_supervision or frozen
    #[arg(long)]
    pub mode: Option<ProtocolMode>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// paas (dominant period + 1) or fixed:B
    #[arg(long, value_name = "RULE")]
    pub batch_rule: Option<BatchRule>,
    /// Adam learning rate for adaptation
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam steps per adaptation update
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Calibrate the forecast only, not the look-back window
    #[arg(long)]
    pub no_input_calibration: bool,
    /// Ridge penalty for OLS
    #[arg(long)]
    pub ridge: Option<f64>,
    /// DLinear training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// DLinear moving-average kernel
    #[arg(long)]
    pub kernel: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, UsageError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set!(
            timestamp_column => cfg.timestamp_column,
            forecaster => cfg.forecaster,
            adapter => cfg.adapter,
            mode => cfg.mode,
            lookback => cfg.lookback,
            horizon => cfg.horizon,
            batch_rule => cfg.batch_rule,
            lr => cfg.lr,
            steps => cfg.steps,
            seed => cfg.seed,
            out => cfg.out,
            ridge => cfg.ridge,
            epochs => cfg.dlinear.epochs,
            kernel => cfg.dlinear.kernel,
        );
        if self.data.is_some() {
            cfg.data = self.data.clone();
        }
        if self.model.is_some() {
            cfg.model = self.model.clone();
        }
        if self.no_input_calibration {
            cfg.use_input_calibration = false;
        }
        cfg.dlinear.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(UsageError("lookback and horizon must be at least 1".into()));
        }
        self.protocol().validate().map_err(|e| UsageError(e.to_string()))
    }

    pub fn data_path(&self) -> Result<&Path, UsageError> {
        let path = self
            .data
            .as_deref()
            .ok_or_else(|| UsageError("no dataset given (use --data or `data` in the config)".into()))?;
        if !path.is_file() {
            return Err(UsageError(format!("dataset {} does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            kind: self.adapter,
            use_input_calibration: self.use_input_calibration,
            gate_init: self.gate_init,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            mode: self.mode,
            matured_selection: self.matured_selection,
            steps_per_update: self.steps,
            optimizer: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            batch_rule: self.batch_rule,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form (the output directory excluded).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

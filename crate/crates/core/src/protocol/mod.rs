//! Rolling test-time adaptation over the test region.
//!
//! Each test mini-batch `k` (anchor `t_k`, size `B_k`) is handled in order:
//!
//! 1. record it in the [`MaturationLedger`] and look up the matured set;
//! 2. predict it with the current adapter (pre-update);
//! 3. take `steps_per_update` Adam steps on the selected supervision;
//! 4. re-forecast it with the updated adapter and store the final prediction.
//!
//! In matured-only mode step 3 only reads batches whose whole target span is
//! at or before `t_k`. Mixed supervision adds the revealed prefix of the
//! current batch's first sample and stitches final predictions.

mod audit;
mod ledger;
mod trace;

use std::time::Instant;

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_backward, adapter_forward, AdapterState, GradientBlock};
use crate::data::{batch_plan, make_rolling_batches, Region, RollingBatch, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::forecaster::ForecasterModel;
use crate::optim::{adam_step, AdamConfig, StepOutcome};
use crate::spectral::estimate_dominant_period;

pub use audit::{
    audit_streaming_leakage, audit_update_schedule, matured_schedule, plan_from_sizes,
    streaming_schedule, LeakageReport, OverlapRecord, ScheduledUpdate,
};
pub use ledger::{LedgerEntry, MaturationLedger};
pub use trace::{
    AccessKind, BatchRecord, RunTrace, SupervisionAccess, UpdateRecord, TRACE_MAGIC,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    #[default]
    MaturedOnly,
    MixedSupervision,
    /// No adaptation: the source forecaster alone.
    Frozen,
}

impl std::fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProtocolMode::MaturedOnly => "matured_only",
            ProtocolMode::MixedSupervision => "mixed_supervision",
            ProtocolMode::Frozen => "frozen",
        })
    }
}

impl std::str::FromStr for ProtocolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "matured_only" | "matured" => Ok(ProtocolMode::MaturedOnly),
            "mixed_supervision" | "mixed" => Ok(ProtocolMode::MixedSupervision),
            "frozen" => Ok(ProtocolMode::Frozen),
            other => Err(Error::Config(format!("unknown protocol mode `{other}`"))),
        }
    }
}

/// Which matured batches enter the loss, with which weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum MaturedSelection {
    /// Only `m(k)`, weight 1.
    #[default]
    MostRecent,
    /// Every matured batch, weight `decay^age` (age 0 for `m(k)`), normalized
    /// to sum to 1.
    AllWithWeights { decay: f64 },
}

impl MaturedSelection {
    /// `(batch, weight)` pairs for a matured prefix of length `matured`.
    pub fn select(&self, matured: usize) -> Vec<(usize, f64)> {
        match *self {
            _ if matured == 0 => Vec::new(),
            MaturedSelection::MostRecent => vec![(matured - 1, 1.0)],
            MaturedSelection::AllWithWeights { decay } => {
                let raw: Vec<f64> = (0..matured)
                    .map(|m| decay.powi((matured - 1 - m) as i32))
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter()
                    .enumerate()
                    .filter(|(_, w)| *w > 0.0)
                    .map(|(m, w)| (m, w / total))
                    .collect()
            }
        }
    }
}

/// Mini-batch size rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRule {
    /// `B = P + 1` with `P` the dominant period of the training series.
    #[default]
    Paas,
    Fixed(usize),
}

impl std::fmt::Display for BatchRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchRule::Paas => f.write_str("paas"),
            BatchRule::Fixed(b) => write!(f, "fixed:{b}"),
        }
    }
}

impl std::str::FromStr for BatchRule {
    type Err = Error;

    /// `paas`, `fixed:24` or a bare `24`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "paas" {
            return Ok(BatchRule::Paas);
        }
        let num = s.strip_prefix("fixed:").or_else(|| s.strip_prefix("fixed=")).unwrap_or(&s);
        match num.parse::<usize>() {
            Ok(b) if b >= 1 => Ok(BatchRule::Fixed(b)),
            _ => Err(Error::Config(format!(
                "batch rule `{s}`: expected `paas`, `fixed:<B>` or a positive integer"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    pub matured_selection: MaturedSelection,
    pub steps_per_update: usize,
    pub optimizer: AdamConfig,
    pub batch_rule: BatchRule,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            mode: ProtocolMode::MaturedOnly,
            matured_selection: MaturedSelection::MostRecent,
            steps_per_update: 1,
            optimizer: AdamConfig::default(),
            batch_rule: BatchRule::Paas,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.steps_per_update == 0 {
            return Err(Error::Config("steps_per_update must be at least 1".into()));
        }
        if let BatchRule::Fixed(0) = self.batch_rule {
            return Err(Error::Config("fixed batch size must be at least 1".into()));
        }
        if let MaturedSelection::AllWithWeights { decay } = self.matured_selection {
            if !(decay.is_finite() && decay >= 0.0) {
                return Err(Error::Config(format!("matured weight decay {decay} must be ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Nominal batch size for `rule` and the period it was derived from.
pub fn resolve_batch_size(ds: &TimeSeriesDataset, rule: BatchRule) -> Result<(usize, Option<usize>)> {
    match rule {
        BatchRule::Fixed(b) => Ok((b, None)),
        BatchRule::Paas => {
            let p = estimate_dominant_period(ds.train_values())?;
            Ok((p + 1, Some(p)))
        }
    }
}

/// Test-region batches under `rule`, plus the detected period.
pub fn test_batches(
    ds: &TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
    rule: BatchRule,
) -> Result<(Vec<RollingBatch>, Option<usize>)> {
    let (nominal, period) = resolve_batch_size(ds, rule)?;
    let origins = ds.origins(Region::Test, lookback, horizon).len();
    let sizes = batch_plan(origins, nominal);
    Ok((make_rolling_batches(ds, Region::Test, lookback, horizon, &sizes)?, period))
}

fn check_shapes(
    ds: &TimeSeriesDataset,
    model: &ForecasterModel,
    state: &AdapterState,
    lookback: usize,
    horizon: usize,
) -> Result<()> {
    ds.check_windows(lookback, horizon)?;
    let c = ds.channels();
    if (model.lookback, model.horizon, model.channels) != (lookback, horizon, c) {
        return Err(Error::Config(format!(
            "forecaster is (L={}, H={}, C={}), run needs (L={lookback}, H={horizon}, C={c})",
            model.lookback, model.horizon, model.channels
        )));
    }
    let input_ok = state
        .input
        .as_ref()
        .is_none_or(|m| m.len() == lookback && m.channels() == c);
    if !input_ok || state.output.len() != horizon || state.output.channels() != c {
        return Err(Error::Config("adapter shape does not match the run".into()));
    }
    if state.optimizer.len() != state.param_count() {
        return Err(Error::Config("optimizer state does not mirror the adapter".into()));
    }
    Ok(())
}

/// Mean squared error and its gradient `2(pred − target)/n`.
fn mse_with_grad(pred: &Array3<f64>, target: &Array3<f64>) -> (f64, Array3<f64>) {
    let n = pred.len().max(1) as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

struct Clock {
    forecaster: std::time::Duration,
}

/// Loss and gradient of one supervised batch through the current adapter.
fn supervised_grad(
    state: &AdapterState,
    model: &ForecasterModel,
    inputs: &Array3<f64>,
    targets: &Array3<f64>,
    clock: &mut Clock,
) -> Result<(f64, GradientBlock)> {
    let (pred, tape) = adapter_forward(state, model, inputs)?;
    clock.forecaster += tape.forecaster_time;
    let (loss, grad) = mse_with_grad(&pred, targets);
    Ok((loss, adapter_backward(state, model, &tape, &grad)?))
}

/// Runs the protocol selected by `config.mode`.
pub fn run_protocol(
    ds: &TimeSeriesDataset,
    model: &ForecasterModel,
    state: &mut AdapterState,
    config: &ProtocolConfig,
    lookback: usize,
    horizon: usize,
) -> Result<RunTrace> {
    config.validate()?;
    check_shapes(ds, model, state, lookback, horizon)?;
    let start = Instant::now();
    let period_start = Instant::now();
    let (batches, period) = test_batches(ds, lookback, horizon, config.batch_rule)?;
    let period_estimation_secs = if period.is_some() {
        period_start.elapsed().as_secs_f64()
    } else {
        0.0
    };

    let n: usize = batches.iter().map(|b| b.size()).sum();
    let c = ds.channels();
    let mut trace = RunTrace {
        dataset: ds.name.clone(),
        forecaster: model.kind().to_string(),
        mode: config.mode,
        lookback,
        horizon,
        channels: c,
        period,
        period_estimation_secs,
        frozen: Array3::zeros((n, horizon, c)),
        pre: Array3::zeros((n, horizon, c)),
        post: Array3::zeros((n, horizon, c)),
        final_predictions: Array3::zeros((n, horizon, c)),
        targets: Array3::zeros((n, horizon, c)),
        ..Default::default()
    };

    let mut ledger = MaturationLedger::new(horizon);
    let mut offset = 0;
    for (k, batch) in batches.iter().enumerate() {
        let matured = ledger.push(batch.anchor, batch.size())?;
        let rows = offset..offset + batch.size();
        offset += batch.size();
        let frozen = model.forward(&batch.inputs)?;
        trace.frozen.slice_mut(s![rows.clone(), .., ..]).assign(&frozen);
        trace.targets.slice_mut(s![rows.clone(), .., ..]).assign(&batch.targets);

        if config.mode == ProtocolMode::Frozen {
            for t in [&mut trace.pre, &mut trace.post, &mut trace.final_predictions] {
                t.slice_mut(s![rows.clone(), .., ..]).assign(&frozen);
            }
            trace.batches.push(BatchRecord {
                index: k,
                anchor: batch.anchor,
                size: batch.size(),
                matured_count: matured.len(),
                selected: Vec::new(),
                updates: Vec::new(),
                adaptation_secs: 0.0,
                forecaster_secs: 0.0,
            });
            continue;
        }

        let batch_start = Instant::now();
        let mut clock = Clock {
            forecaster: Default::default(),
        };
        let (pre, pre_tape) = adapter_forward(state, model, &batch.inputs)?;
        clock.forecaster += pre_tape.forecaster_time;
        drop(pre_tape);

        let selected = config.matured_selection.select(matured.len());
        let pogt_len = if config.mode == ProtocolMode::MixedSupervision {
            (batch.size() - 1).min(horizon)
        } else {
            0
        };
        if config.mode == ProtocolMode::MixedSupervision && pogt_len == 0 {
            log::info!("batch {k}: size 1, no revealed prefix to supervise");
        }

        let mut updates = Vec::new();
        if !selected.is_empty() || pogt_len > 0 {
            for &(m, _) in &selected {
                let (first_row, last_row) = batches[m].target_span();
                trace.access_log.push(SupervisionAccess {
                    batch: k,
                    anchor: batch.anchor,
                    source: m,
                    kind: AccessKind::Matured,
                    first_row,
                    last_row,
                });
            }
            if pogt_len > 0 {
                trace.access_log.push(SupervisionAccess {
                    batch: k,
                    anchor: batch.anchor,
                    source: k,
                    kind: AccessKind::Pogt,
                    first_row: batch.anchor + 1,
                    last_row: batch.anchor + pogt_len,
                });
            }
            let first_input = batch.inputs.slice(s![0..1, .., ..]).to_owned();
            let first_target = batch.targets.slice(s![0..1, 0..pogt_len, ..]).to_owned();
            for _ in 0..config.steps_per_update {
                let mut total = vec![0.0; state.param_count()];
                let add = |total: &mut Vec<f64>, g: GradientBlock, w: f64| {
                    for (t, v) in total.iter_mut().zip(g.flatten()) {
                        *t += w * v;
                    }
                };
                let mut matured_loss = None;
                if !selected.is_empty() {
                    let mut acc = 0.0;
                    for &(m, w) in &selected {
                        let (loss, g) = supervised_grad(
                            state,
                            model,
                            &batches[m].inputs,
                            &batches[m].targets,
                            &mut clock,
                        )?;
                        acc += w * loss;
                        add(&mut total, g, w);
                    }
                    matured_loss = Some(acc);
                }
                let mut pogt_loss = None;
                if pogt_len > 0 {
                    let (pred, tape) = adapter_forward(state, model, &first_input)?;
                    clock.forecaster += tape.forecaster_time;
                    let mut grad = Array3::zeros(pred.dim());
                    let head = pred.slice(s![.., 0..pogt_len, ..]).to_owned();
                    let (loss, g) = mse_with_grad(&head, &first_target);
                    grad.slice_mut(s![.., 0..pogt_len, ..]).assign(&g);
                    add(&mut total, adapter_backward(state, model, &tape, &grad)?, 1.0);
                    pogt_loss = Some(loss);
                }
                let mut params = state.parameters();
                let outcome = adam_step(&mut params, &total, &mut state.optimizer, &config.optimizer)?;
                if outcome == StepOutcome::Applied {
                    state.set_parameters(&params)?;
                } else {
                    log::warn!("batch {k}: non-finite gradient, update skipped");
                }
                updates.push(UpdateRecord {
                    loss: matured_loss.unwrap_or(0.0) + pogt_loss.unwrap_or(0.0),
                    matured_loss,
                    pogt_loss,
                    outcome,
                });
            }
        }

        let (post, post_tape) = if updates.is_empty() {
            (pre.clone(), None)
        } else {
            let (p, t) = adapter_forward(state, model, &batch.inputs)?;
            (p, Some(t))
        };
        if let Some(t) = post_tape {
            clock.forecaster += t.forecaster_time;
        }
        let final_pred = match config.mode {
            ProtocolMode::MixedSupervision => stitch(&pre, &post, batch.size()),
            _ => post.clone(),
        };
        let elapsed = batch_start.elapsed();
        trace.pre.slice_mut(s![rows.clone(), .., ..]).assign(&pre);
        trace.post.slice_mut(s![rows.clone(), .., ..]).assign(&post);
        trace.final_predictions.slice_mut(s![rows, .., ..]).assign(&final_pred);
        trace.batches.push(BatchRecord {
            index: k,
            anchor: batch.anchor,
            size: batch.size(),
            matured_count: matured.len(),
            selected,
            updates,
            adaptation_secs: elapsed.saturating_sub(clock.forecaster).as_secs_f64(),
            forecaster_secs: clock.forecaster.as_secs_f64(),
        });
    }

    if config.mode != ProtocolMode::Frozen && !batches.is_empty() {
        let matured_any = ledger.matured_counts().last().is_some_and(|&n| n > 0);
        if !matured_any {
            let msg = format!(
                "no mini-batch matured over {} test batches (H={horizon}); results equal the frozen forecaster",
                batches.len()
            );
            log::warn!("{msg}");
            trace.warnings.push(msg);
        }
    }
    trace.total_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Number of leading steps of 0-based sample `j` that are already observed at
/// the end of a batch of size `size`: rows `t_k+j+1 ..= t_k+size−1`.
pub fn observed_prefix(j: usize, size: usize, horizon: usize) -> usize {
    (size - 1 - j.min(size - 1)).min(horizon)
}

/// Keeps the observed prefix of every sample from `pre`, the rest from `post`.
pub fn stitch(pre: &Array3<f64>, post: &Array3<f64>, size: usize) -> Array3<f64> {
    let mut out = post.clone();
    let horizon = pre.dim().1;
    for (j, mut sample) in out.axis_iter_mut(Axis(0)).enumerate() {
        let p = observed_prefix(j, size, horizon);
        sample
            .slice_mut(s![0..p, ..])
            .assign(&pre.slice(s![j, 0..p, ..]));
    }
    out
}

/// [`run_protocol`] in matured-only mode.
pub fn run_matured_only(
    ds: &TimeSeriesDataset,
    model: &ForecasterModel,
    state: &mut AdapterState,
    config: &ProtocolConfig,
    lookback: usize,
    horizon: usize,
) -> Result<RunTrace> {
    if config.mode != ProtocolMode::MaturedOnly {
        return Err(Error::Config(format!("run_matured_only called with mode {}", config.mode)));
    }
    run_protocol(ds, model, state, config, lookback, horizon)
}

/// [`run_protocol`] in mixed-supervision mode.
pub fn run_mixed_supervision(
    ds: &TimeSeriesDataset,
    model: &ForecasterModel,
    state: &mut AdapterState,
    config: &ProtocolConfig,
    lookback: usize,
    horizon: usize,
) -> Result<RunTrace> {
    if config.mode != ProtocolMode::MixedSupervision {
        return Err(Error::Config(format!(
            "run_mixed_supervision called with mode {}",
            config.mode
        )));
    }
    run_protocol(ds, model, state, config, lookback, horizon)
}

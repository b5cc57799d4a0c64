//! Run traces and their on-disk forms.
//!
//! * JSON summary: everything except the prediction tensors.
//! * Batch CSV: one row per update step.
//! * Window CSV: one row per rolling window with frozen / pre / final MSE.
//! * Binary predictions: magic `FQTRACE1`, little-endian `u64` header length,
//!   the JSON summary, then the frozen, pre, post, final and target tensors as
//!   little-endian `f64`, each `[N × H × C]` row-major.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::ProtocolMode;
use crate::error::{Error, Result};
use crate::metrics::mse;
use crate::optim::StepOutcome;

pub const TRACE_MAGIC: &[u8; 8] = b"FQTRACE1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    /// Full target span of a matured past batch.
    Matured,
    /// Revealed prefix of the current batch's first sample.
    Pogt,
}

/// Targets read by one loss evaluation, as an inclusive row range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionAccess {
    /// Batch being processed when the targets were read.
    pub batch: usize,
    /// Its anchor `t_k`.
    pub anchor: usize,
    /// Batch the targets belong to.
    pub source: usize,
    pub kind: AccessKind,
    pub first_row: usize,
    pub last_row: usize,
}

impl SupervisionAccess {
    /// Every `(batch, target row)` pair the access covers.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.first_row..=self.last_row).map(move |t| (self.batch, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    /// Total loss at the start of the step.
    pub loss: f64,
    pub matured_loss: Option<f64>,
    pub pogt_loss: Option<f64>,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub anchor: usize,
    pub size: usize,
    /// `|𝓜_k|`
    pub matured_count: usize,
    /// Selected matured batches and their loss weights.
    pub selected: Vec<(usize, f64)>,
    pub updates: Vec<UpdateRecord>,
    /// Calibration, losses, backward passes and re-forecasting, excluding the
    /// frozen forecaster's forward passes.
    pub adaptation_secs: f64,
    pub forecaster_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub forecaster: String,
    pub mode: ProtocolMode,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Dominant period found by batch-size scheduling, if used.
    pub period: Option<usize>,
    pub period_estimation_secs: f64,
    pub total_secs: f64,
    pub batches: Vec<BatchRecord>,
    /// Append-only log of every target range read by a loss.
    pub access_log: Vec<SupervisionAccess>,
    pub warnings: Vec<String>,
    /// Source forecaster alone, `[N × H × C]` over all test windows.
    #[serde(skip)]
    pub frozen: Array3<f64>,
    /// Calibrated predictions before the batch's update.
    #[serde(skip)]
    pub pre: Array3<f64>,
    /// Re-forecast after the batch's update.
    #[serde(skip)]
    pub post: Array3<f64>,
    /// Evaluated predictions.
    #[serde(skip)]
    pub final_predictions: Array3<f64>,
    #[serde(skip)]
    pub targets: Array3<f64>,
}

impl RunTrace {
    pub fn windows(&self) -> usize {
        self.targets.dim().0
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.batches.iter().map(|b| b.size).collect()
    }

    /// `(anchor, size)` of every batch.
    pub fn plan(&self) -> Vec<(usize, usize)> {
        self.batches.iter().map(|b| (b.anchor, b.size)).collect()
    }

    /// Row offset of batch `k` in the prediction tensors.
    pub fn batch_offset(&self, k: usize) -> usize {
        self.batches[..k].iter().map(|b| b.size).sum()
    }

    /// `(pre, final, targets)` views of batch `k`.
    pub fn batch_view(&self, k: usize) -> (ArrayView3<'_, f64>, ArrayView3<'_, f64>, ArrayView3<'_, f64>) {
        let lo = self.batch_offset(k);
        let hi = lo + self.batches[k].size;
        (
            self.pre.slice(s![lo..hi, .., ..]),
            self.final_predictions.slice(s![lo..hi, .., ..]),
            self.targets.slice(s![lo..hi, .., ..]),
        )
    }

    /// Accesses that read a row later than the anchor of the batch being
    /// processed. Empty for every matured-only run.
    pub fn leakage_violations(&self) -> Vec<&SupervisionAccess> {
        self.access_log.iter().filter(|a| a.last_row > a.anchor).collect()
    }

    pub fn update_count(&self) -> usize {
        self.batches.iter().filter(|b| !b.updates.is_empty()).count()
    }

    pub fn skipped_steps(&self) -> usize {
        self.batches
            .iter()
            .flat_map(|b| &b.updates)
            .filter(|u| u.outcome == StepOutcome::SkippedNonFinite)
            .count()
    }

    pub fn mean_adaptation_ms(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        let total: f64 = self.batches.iter().map(|b| b.adaptation_secs).sum::<f64>()
            + self.period_estimation_secs;
        1e3 * total / self.batches.len() as f64
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            config_hash: &'a str,
            #[serde(flatten)]
            trace: &'a RunTrace,
        }
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, &Summary { config_hash, trace: self })?;
        Ok(())
    }

    pub fn write_batch_csv(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(
            out,
            "batch,anchor,size,matured_count,step,loss,matured_loss,pogt_loss,outcome,adaptation_ms"
        )?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for b in &self.batches {
            let ms = b.adaptation_secs * 1e3;
            if b.updates.is_empty() {
                writeln!(out, "{},{},{},{},,,,,none,{ms:.6}", b.index, b.anchor, b.size, b.matured_count)?;
            }
            for (step, u) in b.updates.iter().enumerate() {
                let outcome = match u.outcome {
                    StepOutcome::Applied => "applied",
                    StepOutcome::SkippedNonFinite => "skipped_non_finite",
                };
                writeln!(
                    out,
                    "{},{},{},{},{step},{:e},{},{},{outcome},{ms:.6}",
                    b.index,
                    b.anchor,
                    b.size,
                    b.matured_count,
                    u.loss,
                    opt(u.matured_loss),
                    opt(u.pogt_loss)
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_window_csv(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "window,batch,sample,first_target_row,frozen_mse,pre_mse,final_mse")?;
        let mut w = 0;
        for b in &self.batches {
            for j in 0..b.size {
                let t = self.targets.slice(s![w, .., ..]);
                writeln!(
                    out,
                    "{w},{},{},{},{:e},{:e},{:e}",
                    b.index,
                    j + 1,
                    b.anchor + 1 + j,
                    mse(&self.frozen.slice(s![w, .., ..]), &t),
                    mse(&self.pre.slice(s![w, .., ..]), &t),
                    mse(&self.final_predictions.slice(s![w, .., ..]), &t),
                )?;
                w += 1;
            }
        }
        out.flush()?;
        Ok(())
    }

    fn tensors(&self) -> [&Array3<f64>; 5] {
        [&self.frozen, &self.pre, &self.post, &self.final_predictions, &self.targets]
    }

    /// Writes the summary and all prediction tensors.
    pub fn write_binary(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            config_hash: &'a str,
            shape: [usize; 3],
            trace: &'a RunTrace,
        }
        let header = serde_json::to_vec(&Header {
            config_hash,
            shape: self.targets.dim().into(),
            trace: self,
        })?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(TRACE_MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for t in self.tensors() {
            for v in t.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a file written by [`RunTrace::write_binary`]; returns the trace
    /// and its config hash.
    pub fn read_binary(path: impl AsRef<Path>) -> Result<(RunTrace, String)> {
        #[derive(Deserialize)]
        struct Header {
            config_hash: String,
            shape: [usize; 3],
            trace: RunTrace,
        }
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(Error::Format("not a prediction trace file".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let Header {
            config_hash,
            shape,
            mut trace,
        } = serde_json::from_slice(&header)?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        let mut read = || -> Result<Array3<f64>> {
            input.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
                .map_err(|e| Error::Format(e.to_string()))
        };
        trace.frozen = read()?;
        trace.pre = read()?;
        trace.post = read()?;
        trace.final_predictions = read()?;
        trace.targets = read()?;
        Ok((trace, config_hash))
    }
}

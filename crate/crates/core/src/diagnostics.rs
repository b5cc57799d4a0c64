//! Post-processing of run traces: correction spectra, early-vs-late
//! overlapping-region errors, aggregate metrics, CSV and SVG output.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array3, ArrayView3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::metrics::{mae, mse};
use crate::protocol::{ProtocolMode, RunTrace};
use crate::spectral::{num_bins, RealFft};

/// Window- and channel-averaged magnitude spectrum of `post − pre` along the
/// horizon, DC omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSpectrum {
    pub label: String,
    /// `magnitudes[i]` belongs to frequency bin `i + 1`.
    pub magnitudes: Vec<f64>,
    pub horizon: usize,
    pub windows: usize,
    pub dataset: String,
    pub forecaster: String,
}

impl CorrectionSpectrum {
    pub fn with_provenance(
        mut self,
        label: impl Into<String>,
        dataset: impl Into<String>,
        forecaster: impl Into<String>,
    ) -> Self {
        self.label = label.into();
        self.dataset = dataset.into();
        self.forecaster = forecaster.into();
        self
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(
            out,
            "# label={} dataset={} forecaster={} horizon={} windows={}",
            self.label, self.dataset, self.forecaster, self.horizon, self.windows
        )?;
        writeln!(out, "freq_index,magnitude")?;
        for (i, m) in self.magnitudes.iter().enumerate() {
            writeln!(out, "{},{m:e}", i + 1)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn correction_spectrum(pre: &ArrayView3<'_, f64>, post: &ArrayView3<'_, f64>) -> Result<CorrectionSpectrum> {
    if pre.dim() != post.dim() {
        return Err(Error::Shape(format!(
            "pre {:?} and post {:?} predictions differ",
            pre.dim(),
            post.dim()
        )));
    }
    let (n, horizon, channels) = pre.dim();
    if n == 0 || channels == 0 {
        return Err(Error::Shape("correction spectrum needs at least one window".into()));
    }
    let bins = num_bins(horizon);
    let mut fft = RealFft::new(horizon);
    let mut lane = vec![0.0; horizon];
    let mut spec = vec![Complex64::default(); bins];
    let mut acc = vec![0.0; bins];
    for w in 0..n {
        for c in 0..channels {
            for (t, v) in lane.iter_mut().enumerate() {
                *v = post[[w, t, c]] - pre[[w, t, c]];
            }
            fft.forward(&lane, &mut spec);
            for (a, z) in acc.iter_mut().zip(&spec) {
                *a += z.norm();
            }
        }
    }
    let denom = (n * channels) as f64;
    Ok(CorrectionSpectrum {
        label: String::new(),
        magnitudes: acc.iter().skip(1).map(|a| a / denom).collect(),
        horizon,
        windows: n,
        dataset: String::new(),
        forecaster: String::new(),
    })
}

/// Mean overlapping-region MSE per sample position, for batches of one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyLateCurves {
    pub batch_size: usize,
    /// Number of batches averaged.
    pub batches: usize,
    /// Pre-update predictions, position `j` at index `j − 1`.
    pub direct: Vec<f64>,
    /// Final (stitched) predictions.
    pub adjusted: Vec<f64>,
}

impl EarlyLateCurves {
    pub fn write_csv(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "# batch_size={} batches={}", self.batch_size, self.batches)?;
        writeln!(out, "position_j,direct_mse,adjusted_mse")?;
        for (j, (d, a)) in self.direct.iter().zip(&self.adjusted).enumerate() {
            writeln!(out, "{},{d:e},{a:e}", j + 1)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// For each batch of size `batch_size` the shared overlap is rows
/// `[t_k+B, t_k+H]`; sample `j` (1-based) reaches it at horizon offsets
/// `B−j ..= H−j`.
pub fn early_vs_late_curves(trace: &RunTrace, batch_size: usize) -> Result<EarlyLateCurves> {
    let horizon = trace.horizon;
    if batch_size == 0 || horizon < batch_size {
        return Err(Error::EmptyOverlap {
            horizon,
            batch: batch_size,
        });
    }
    let mut direct = vec![0.0; batch_size];
    let mut adjusted = vec![0.0; batch_size];
    let mut count = 0;
    for (k, b) in trace.batches.iter().enumerate() {
        if b.size != batch_size {
            continue;
        }
        count += 1;
        let (pre, fin, tgt) = trace.batch_view(k);
        for j in 1..=batch_size {
            let rows = s![j - 1, batch_size - j..=horizon - j, ..];
            let t = tgt.slice(rows);
            direct[j - 1] += mse(&pre.slice(rows), &t);
            adjusted[j - 1] += mse(&fin.slice(rows), &t);
        }
    }
    if count == 0 {
        return Err(Error::NoMatchingBatches(batch_size));
    }
    for v in direct.iter_mut().chain(adjusted.iter_mut()) {
        *v /= count as f64;
    }
    Ok(EarlyLateCurves {
        batch_size,
        batches: count,
        direct,
        adjusted,
    })
}

/// Columns of the report CSV, in order. Bump [`REPORT_CSV_VERSION`] on change.
pub const REPORT_COLUMNS: [&str; 15] = [
    "version",
    "config_hash",
    "dataset",
    "forecaster",
    "adapter",
    "horizon",
    "mode",
    "mse",
    "mae",
    "frozen_mse",
    "frozen_mae",
    "param_count",
    "windows",
    "mean_adaptation_ms",
    "runtime_s",
];
pub const REPORT_CSV_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_adaptation_ms: f64,
    pub runtime_s: f64,
}

/// Aggregate metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub forecaster: String,
    pub adapter: String,
    pub mode: ProtocolMode,
    pub lookback: usize,
    pub horizon: usize,
    pub windows: usize,
    pub batches: usize,
    pub updates: usize,
    pub skipped_steps: usize,
    pub period: Option<usize>,
    /// Final predictions vs. targets, normalized scale.
    pub mse: f64,
    pub mae: f64,
    pub frozen_mse: f64,
    pub frozen_mae: f64,
    pub param_count: usize,
    pub warnings: Vec<String>,
    pub config: serde_json::Value,
    /// Excluded from determinism comparisons.
    pub timing: Timing,
}

/// Scores every window's full final prediction against its targets.
pub fn evaluate(trace: &RunTrace, ds: &TimeSeriesDataset) -> EvalReport {
    let score = |p: &Array3<f64>, f: fn(&Array3<f64>, &Array3<f64>) -> f64| {
        if p.is_empty() {
            f64::NAN
        } else {
            f(p, &trace.targets)
        }
    };
    EvalReport {
        dataset: ds.name.clone(),
        forecaster: String::new(),
        adapter: String::new(),
        mode: trace.mode,
        lookback: trace.lookback,
        horizon: trace.horizon,
        windows: trace.windows(),
        batches: trace.batches.len(),
        updates: trace.update_count(),
        skipped_steps: trace.skipped_steps(),
        period: trace.period,
        mse: score(&trace.final_predictions, mse),
        mae: score(&trace.final_predictions, mae),
        frozen_mse: score(&trace.frozen, mse),
        frozen_mae: score(&trace.frozen, mae),
        param_count: 0,
        warnings: trace.warnings.clone(),
        config: serde_json::Value::Null,
        timing: Timing {
            mean_adaptation_ms: trace.mean_adaptation_ms(),
            runtime_s: trace.total_secs,
        },
    }
}

impl EvalReport {
    pub fn with_run_info(
        mut self,
        forecaster: impl Into<String>,
        adapter: impl Into<String>,
        param_count: usize,
        config: serde_json::Value,
    ) -> Self {
        self.forecaster = forecaster.into();
        self.adapter = adapter.into();
        self.param_count = param_count;
        self.config = config;
        self
    }

    /// One CSV row in [`REPORT_COLUMNS`] order.
    pub fn csv_row(&self, config_hash: &str) -> String {
        format!(
            "{REPORT_CSV_VERSION},{config_hash},{},{},{},{},{},{:e},{:e},{:e},{:e},{},{},{:.6},{:.6}",
            self.dataset,
            self.forecaster,
            self.adapter,
            self.horizon,
            self.mode,
            self.mse,
            self.mae,
            self.frozen_mse,
            self.frozen_mae,
            self.param_count,
            self.windows,
            self.timing.mean_adaptation_ms,
            self.timing.runtime_s
        )
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }
}

/// Minimal SVG line plot. Non-positive values are dropped on a log axis.
pub fn write_svg_plot(
    path: impl AsRef<Path>,
    title: &str,
    series: &[(&str, &[f64])],
    log_y: bool,
    config_hash: &str,
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let tf = |v: f64| if log_y { v.log10() } else { v };
    let ok = |v: f64| v.is_finite() && (!log_y || v > 0.0);
    let vals: Vec<f64> = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied())
        .filter(|v| ok(*v))
        .map(tf)
        .collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (lo, hi) = if vals.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let max_len = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (max_len - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (tf(v) - lo) / (hi - lo);

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">"#)?;
    writeln!(out, "<!-- config_hash={config_hash} -->")?;
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        out,
        r#"<text x="{}" y="25" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    )?;
    writeln!(
        out,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    )?;
    let label = |v: f64| if log_y { format!("1e{v:.1}") } else { format!("{v:.3e}") };
    writeln!(
        out,
        r#"<text x="5" y="{}" font-family="sans-serif" font-size="10">{}</text>"#,
        H - PAD,
        label(lo)
    )?;
    writeln!(
        out,
        r#"<text x="5" y="{}" font-family="sans-serif" font-size="10">{}</text>"#,
        PAD + 4.0,
        label(hi)
    )?;
    for (s_idx, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[s_idx % COLORS.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| ok(**v))
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        )?;
        writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}" font-family="sans-serif" font-size="11">{}</text>"#,
            W - PAD - 120.0,
            PAD + 15.0 * (s_idx + 1) as f64,
            xml_escape(name)
        )?;
    }
    writeln!(out, "</svg>")?;
    out.flush()?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Averages `values` over windows and channels into a per-step curve.
pub fn per_step_mse(pred: &ArrayView3<'_, f64>, target: &ArrayView3<'_, f64>) -> Vec<f64> {
    let diff = pred - target;
    diff.mapv(|d| d * d)
        .mean_axis(Axis(2))
        .and_then(|a| a.mean_axis(Axis(0)))
        .map(|a| a.to_vec())
        .unwrap_or_default()
}

//! Dataset loading, chronological splits, normalization and rolling windows.
//!
//! Indices are 0-based rows of the full series. A rolling *origin* is identified
//! by the row of its first forecasted target; the sample with first target `t`
//! reads rows `t−L..t` as look-back and `t..t+H` as target. A mini-batch's
//! anchor is the row immediately preceding its first sample's first target.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_RATIO: f64 = 0.7;
pub const VAL_RATIO: f64 = 0.1;

/// Per-channel z-normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// `(train_end, val_end)`: train is `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitBounds {
    /// Floor of the cumulative 0.7 / 0.8 ratios, in exact integer arithmetic.
    pub fn from_len(rows: usize) -> Self {
        SplitBounds {
            train_end: rows * 7 / 10,
            val_end: rows * 8 / 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Train,
    Val,
    Test,
}

/// A normalized multivariate series with its chronological split.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub name: String,
    /// `[T × C]`, z-normalized with the train-region statistics.
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
    pub split: SplitBounds,
    pub norm_stats: Vec<ChannelStats>,
}

impl TimeSeriesDataset {
    /// Builds a dataset from raw (unnormalized) observations.
    pub fn from_raw(
        name: impl Into<String>,
        channel_names: Vec<String>,
        raw: Array2<f64>,
    ) -> Result<Self> {
        let (rows, channels) = raw.dim();
        if channel_names.len() != channels {
            return Err(Error::Shape(format!(
                "{} channel names for {channels} columns",
                channel_names.len()
            )));
        }
        let split = SplitBounds::from_len(rows);
        if !(0 < split.train_end && split.train_end < split.val_end && split.val_end < rows) {
            return Err(Error::TooShort { rows, needed: 4 });
        }
        if let Some((row, _)) = raw.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parse {
                row: row.0 + 1,
                message: "non-finite value".into(),
            });
        }

        let train = raw.slice(s![..split.train_end, ..]);
        let mut norm_stats = Vec::with_capacity(channels);
        for (c, name) in channel_names.iter().enumerate() {
            let col = train.column(c);
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 0.0) || std < 1e-12 * mean.abs().max(1.0) {
                return Err(Error::ConstantChannel(name.clone()));
            }
            norm_stats.push(ChannelStats { mean, std });
        }

        let mut values = raw;
        for (mut col, st) in values.axis_iter_mut(Axis(1)).zip(&norm_stats) {
            col.mapv_inplace(|v| (v - st.mean) / st.std);
        }
        Ok(TimeSeriesDataset {
            name: name.into(),
            values,
            channel_names,
            split,
            norm_stats,
        })
    }

    /// Reads a CSV with a header row, one timestamp column and numeric channels.
    ///
    /// Row numbers in errors count data rows from 1 (the header is row 0).
    pub fn load_csv(path: impl AsRef<Path>, timestamp_column: &str) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let ts_idx = headers
            .iter()
            .position(|h| h == timestamp_column)
            .ok_or_else(|| Error::Parse {
                row: 0,
                message: format!("no timestamp column `{timestamp_column}` in header"),
            })?;
        let channel_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ts_idx)
            .map(|(_, h)| h.to_string())
            .collect();
        if channel_names.is_empty() {
            return Err(Error::Parse {
                row: 0,
                message: "no channel columns".into(),
            });
        }

        let mut data = Vec::new();
        let mut prev_ts: Option<String> = None;
        let mut rows = 0usize;
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            if record.len() != headers.len() {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {} fields, found {}", headers.len(), record.len()),
                });
            }
            let ts = &record[ts_idx];
            if let Some(prev) = &prev_ts {
                if !timestamp_increases(prev, ts) {
                    return Err(Error::Parse {
                        row,
                        message: format!("timestamp `{ts}` does not follow `{prev}`"),
                    });
                }
            }
            prev_ts = Some(ts.to_string());
            for (j, field) in record.iter().enumerate() {
                if j == ts_idx {
                    continue;
                }
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("column `{}`: `{field}` is not a number", &headers[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        message: format!("column `{}`: non-finite value", &headers[j]),
                    });
                }
                data.push(v);
            }
            rows += 1;
        }
        let raw = Array2::from_shape_vec((rows, channel_names.len()), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_raw(name, channel_names, raw)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// `[start, end)` rows of a region.
    pub fn region_bounds(&self, region: Region) -> (usize, usize) {
        match region {
            Region::Train => (0, self.split.train_end),
            Region::Val => (self.split.train_end, self.split.val_end),
            Region::Test => (self.split.val_end, self.len()),
        }
    }

    pub fn train_values(&self) -> ArrayView2<'_, f64> {
        self.values.slice(s![..self.split.train_end, ..])
    }

    /// First-target rows of every valid origin in `region`: the target lies in
    /// the region and the look-back (which may reach before it) in the series.
    pub fn origins(&self, region: Region, lookback: usize, horizon: usize) -> std::ops::Range<usize> {
        let (start, end) = self.region_bounds(region);
        let first = start.max(lookback);
        if end < horizon || first + horizon > end {
            return first..first;
        }
        first..end - horizon + 1
    }

    /// Errors unless the test region hosts at least one `(L, H)` window.
    pub fn check_windows(&self, lookback: usize, horizon: usize) -> Result<()> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config("look-back and horizon must be at least 1".into()));
        }
        if self.origins(Region::Test, lookback, horizon).is_empty() {
            let (start, _) = self.region_bounds(Region::Test);
            return Err(Error::TooShort {
                rows: self.len(),
                needed: start.max(lookback) + horizon,
            });
        }
        Ok(())
    }

    /// All `(input, target)` windows of a region, in origin order.
    pub fn windows(&self, region: Region, lookback: usize, horizon: usize) -> (Array3<f64>, Array3<f64>) {
        let origins: Vec<usize> = self.origins(region, lookback, horizon).collect();
        self.windows_at(&origins, lookback, horizon)
    }

    pub(crate) fn windows_at(
        &self,
        origins: &[usize],
        lookback: usize,
        horizon: usize,
    ) -> (Array3<f64>, Array3<f64>) {
        let c = self.channels();
        let mut inputs = Array3::zeros((origins.len(), lookback, c));
        let mut targets = Array3::zeros((origins.len(), horizon, c));
        for (i, &t) in origins.iter().enumerate() {
            inputs
                .slice_mut(s![i, .., ..])
                .assign(&self.values.slice(s![t - lookback..t, ..]));
            targets
                .slice_mut(s![i, .., ..])
                .assign(&self.values.slice(s![t..t + horizon, ..]));
        }
        (inputs, targets)
    }

    /// Applies the train statistics to raw observations `[n × C]`.
    pub fn normalize(&self, raw: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = raw.to_owned();
        for (mut col, st) in out.axis_iter_mut(Axis(1)).zip(&self.norm_stats) {
            col.mapv_inplace(|v| (v - st.mean) / st.std);
        }
        out
    }

    /// Maps normalized values back to the original scale.
    pub fn denormalize(&self, normalized: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = normalized.to_owned();
        for (mut col, st) in out.axis_iter_mut(Axis(1)).zip(&self.norm_stats) {
            col.mapv_inplace(|v| v * st.std + st.mean);
        }
        out
    }
}

fn timestamp_increases(prev: &str, next: &str) -> bool {
    match (prev.parse::<f64>(), next.parse::<f64>()) {
        (Ok(a), Ok(b)) => b > a,
        _ => next > prev,
    }
}

/// One rolling mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingBatch {
    pub index: usize,
    /// Row immediately preceding the first sample's first target.
    pub anchor: usize,
    /// `[B × L × C]`
    pub inputs: Array3<f64>,
    /// `[B × H × C]`
    pub targets: Array3<f64>,
}

impl RollingBatch {
    pub fn size(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.targets.dim().1
    }

    /// First target row of sample `j` (0-based sample index).
    pub fn first_target(&self, j: usize) -> usize {
        self.anchor + 1 + j
    }

    /// Inclusive `[first, last]` rows covered by the batch targets.
    pub fn target_span(&self) -> (usize, usize) {
        target_span(self.anchor, self.size(), self.horizon())
    }
}

/// Inclusive target span `[t+1, t+H+B−1]` of a batch with anchor `t`.
pub fn target_span(anchor: usize, size: usize, horizon: usize) -> (usize, usize) {
    (anchor + 1, anchor + horizon + size - 1)
}

/// Consecutive batch sizes of `nominal` covering `origins`, the last one truncated.
pub fn batch_plan(origins: usize, nominal: usize) -> Vec<usize> {
    assert!(nominal >= 1, "batch size must be at least 1");
    let mut sizes = vec![nominal; origins / nominal];
    if origins % nominal != 0 {
        sizes.push(origins % nominal);
    }
    sizes
}

/// Groups every rolling origin of `region` into consecutive mini-batches.
pub fn make_rolling_batches(
    ds: &TimeSeriesDataset,
    region: Region,
    lookback: usize,
    horizon: usize,
    batch_sizes: &[usize],
) -> Result<Vec<RollingBatch>> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config("look-back and horizon must be at least 1".into()));
    }
    let origins = ds.origins(region, lookback, horizon);
    if origins.is_empty() {
        return Ok(Vec::new());
    }
    let total: usize = batch_sizes.iter().sum();
    if total != origins.len() || batch_sizes.contains(&0) {
        return Err(Error::BatchSizeMismatch {
            expected: origins.len(),
            got: total,
        });
    }
    let mut batches = Vec::with_capacity(batch_sizes.len());
    let mut next = origins.start;
    for (index, &size) in batch_sizes.iter().enumerate() {
        let firsts: Vec<usize> = (next..next + size).collect();
        let (inputs, targets) = ds.windows_at(&firsts, lookback, horizon);
        batches.push(RollingBatch {
            index,
            anchor: next - 1,
            inputs,
            targets,
        });
        next += size;
    }
    Ok(batches)
}

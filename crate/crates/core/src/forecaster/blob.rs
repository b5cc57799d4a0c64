//! JSON model files: kind, shapes and flat row-major weight arrays.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{ForecasterKind, ForecasterModel, ForecasterWeights};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "freqcal-forecaster";
pub const MODEL_VERSION: u32 = 1;

/// A flat row-major array with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayBlob {
    pub fn from_array<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        ArrayBlob {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::Format(format!("array shape {:?}: {e}", self.shape)))
    }

    fn to_array3(&self) -> Result<Array3<f64>> {
        self.to_array()?
            .into_dimensionality()
            .map_err(|e| Error::Format(e.to_string()))
    }

    fn to_array2(&self) -> Result<Array2<f64>> {
        self.to_array()?
            .into_dimensionality()
            .map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBlob {
    pub format: String,
    pub version: u32,
    pub kind: ForecasterKind,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub train_loss: Option<f64>,
    /// Hash of the experiment configuration that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub arrays: BTreeMap<String, ArrayBlob>,
}

impl ModelBlob {
    fn array(&self, name: &str) -> Result<&ArrayBlob> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("model file has no `{name}` array")))
    }
}

impl ForecasterModel {
    pub fn to_blob(&self) -> ModelBlob {
        let mut arrays = BTreeMap::new();
        let mut kernel = None;
        match &self.weights {
            ForecasterWeights::Naive => {}
            ForecasterWeights::Ols { weight, bias } => {
                arrays.insert("weight".into(), ArrayBlob::from_array(weight));
                arrays.insert("bias".into(), ArrayBlob::from_array(bias));
            }
            ForecasterWeights::Dlinear {
                kernel: k,
                seasonal_weight,
                seasonal_bias,
                trend_weight,
                trend_bias,
            } => {
                kernel = Some(*k);
                arrays.insert("seasonal_weight".into(), ArrayBlob::from_array(seasonal_weight));
                arrays.insert("seasonal_bias".into(), ArrayBlob::from_array(seasonal_bias));
                arrays.insert("trend_weight".into(), ArrayBlob::from_array(trend_weight));
                arrays.insert("trend_bias".into(), ArrayBlob::from_array(trend_bias));
            }
        }
        ModelBlob {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: self.kind(),
            lookback: self.lookback,
            horizon: self.horizon,
            channels: self.channels,
            kernel,
            train_loss: self.train_loss,
            config_hash: None,
            arrays,
        }
    }

    pub fn from_blob(blob: &ModelBlob) -> Result<Self> {
        if blob.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a forecaster file: `{}`", blob.format)));
        }
        if blob.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "forecaster file version {} (supported: {MODEL_VERSION})",
                blob.version
            )));
        }
        let (c, h, l) = (blob.channels, blob.horizon, blob.lookback);
        let expect3 = |name: &str| -> Result<Array3<f64>> {
            let a = blob.array(name)?.to_array3()?;
            if a.dim() != (c, h, l) {
                return Err(Error::Format(format!("`{name}` has shape {:?}", a.dim())));
            }
            Ok(a)
        };
        let expect2 = |name: &str| -> Result<Array2<f64>> {
            let a = blob.array(name)?.to_array2()?;
            if a.dim() != (c, h) {
                return Err(Error::Format(format!("`{name}` has shape {:?}", a.dim())));
            }
            Ok(a)
        };
        let weights = match blob.kind {
            ForecasterKind::Naive => ForecasterWeights::Naive,
            ForecasterKind::Ols => ForecasterWeights::Ols {
                weight: expect3("weight")?,
                bias: expect2("bias")?,
            },
            ForecasterKind::Dlinear => ForecasterWeights::Dlinear {
                kernel: blob
                    .kernel
                    .ok_or_else(|| Error::Format("dlinear model without kernel".into()))?,
                seasonal_weight: expect3("seasonal_weight")?,
                seasonal_bias: expect2("seasonal_bias")?,
                trend_weight: expect3("trend_weight")?,
                trend_bias: expect2("trend_bias")?,
            },
        };
        Ok(ForecasterModel {
            lookback: l,
            horizon: h,
            channels: c,
            train_loss: blob.train_loss,
            weights,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_json_tagged(path, None)
    }

    /// Like [`save_json`](Self::save_json), recording `config_hash` in the blob.
    pub fn save_json_tagged(&self, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
        let mut blob = self.to_blob();
        blob.config_hash = config_hash.map(str::to_owned);
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &blob)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let blob: ModelBlob = serde_json::from_reader(file)?;
        Self::from_blob(&blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_json() {
        let w = Array3::from_shape_fn((2, 3, 4), |(c, h, l)| (c * 100 + h * 10 + l) as f64 / 7.0);
        let b = Array2::from_shape_fn((2, 3), |(c, h)| c as f64 - h as f64);
        let m = ForecasterModel::linear(w, b).unwrap();
        let text = serde_json::to_string(&m.to_blob()).unwrap();
        let back = ForecasterModel::from_blob(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn version_is_checked() {
        let mut blob = ForecasterModel::naive(4, 2, 1).to_blob();
        blob.version = 99;
        assert!(matches!(ForecasterModel::from_blob(&blob), Err(Error::Format(_))));
    }
}

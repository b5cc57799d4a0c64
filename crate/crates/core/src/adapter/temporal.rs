//! Dense per-channel gated calibration in the time domain.
//!
//! `y_c = x_c + tanh(α_c)·(M_c x_c + b_c)` with `M_c` a full `[n × n]` matrix:
//! `C·(n² + n + 1)` parameters per module. Used as the temporal baseline.

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalGcmParams {
    pub len: usize,
    /// `[C × n × n]`, row = output step.
    pub weight: Array3<f64>,
    /// `[C × n]`
    pub bias: Array2<f64>,
    /// `[C]`
    pub gate: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct TemporalTape {
    pub input: Array3<f64>,
    /// `M x + b` before gating.
    pub correction: Array3<f64>,
}

impl TemporalGcmParams {
    pub fn zeros(len: usize, channels: usize) -> Self {
        TemporalGcmParams {
            len,
            weight: Array3::zeros((channels, len, len)),
            bias: Array2::zeros((channels, len)),
            gate: Array1::zeros(channels),
        }
    }

    pub fn identity(len: usize, channels: usize, gate: f64) -> Self {
        let mut p = Self::zeros(len, channels);
        p.gate.fill(gate);
        p
    }

    pub fn channels(&self) -> usize {
        self.gate.len()
    }

    pub fn param_count(&self) -> usize {
        self.channels() * (self.len * self.len + self.len + 1)
    }

    fn check(&self, x: &Array3<f64>) -> Result<()> {
        let (_, n, c) = x.dim();
        if n != self.len || c != self.channels() {
            return Err(Error::Shape(format!(
                "temporal module calibrates [B × {} × {}], got {:?}",
                self.len,
                self.channels(),
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn calibrate(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, TemporalTape)> {
        self.check(x)?;
        let mut correction = Array3::zeros(x.dim());
        let mut out = x.clone();
        for c in 0..self.channels() {
            let xc = x.slice(s![.., .., c]);
            let mut r = xc.dot(&self.weight.index_axis(Axis(0), c).t());
            r += &self.bias.row(c);
            let th = self.gate[c].tanh();
            out.slice_mut(s![.., .., c]).scaled_add(th, &r);
            correction.slice_mut(s![.., .., c]).assign(&r);
        }
        Ok((
            out,
            TemporalTape {
                input: x.clone(),
                correction,
            },
        ))
    }

    pub fn backward(
        &self,
        tape: &TemporalTape,
        grad_out: &Array3<f64>,
        want_input_grad: bool,
    ) -> Result<(TemporalGcmParams, Option<Array3<f64>>)> {
        if grad_out.dim() != tape.input.dim() {
            return Err(Error::Shape(format!(
                "temporal module backward: gradient {:?} does not match tape {:?}",
                grad_out.dim(),
                tape.input.dim()
            )));
        }
        self.check(grad_out)?;
        let mut grads = TemporalGcmParams::zeros(self.len, self.channels());
        let mut grad_in = want_input_grad.then(|| grad_out.clone());
        for c in 0..self.channels() {
            let th = self.gate[c].tanh();
            let g = grad_out.slice(s![.., .., c]);
            let x = tape.input.slice(s![.., .., c]);
            let r = tape.correction.slice(s![.., .., c]);
            grads.gate[c] = (1.0 - th * th) * (&g * &r).sum();
            grads
                .weight
                .index_axis_mut(Axis(0), c)
                .assign(&(g.t().dot(&x) * th));
            grads.bias.row_mut(c).assign(&(g.sum_axis(Axis(0)) * th));
            if let Some(gi) = grad_in.as_mut() {
                let back = g.dot(&self.weight.index_axis(Axis(0), c)) * th;
                gi.slice_mut(s![.., .., c]).zip_mut_with(&back, |a, b| *a += b);
            }
        }
        Ok((grads, grad_in))
    }

    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.weight.iter().copied());
        out.extend(self.bias.iter().copied());
        out.extend(self.gate.iter().copied());
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if flat.len() < need {
            return Err(Error::Shape(format!(
                "need {need} values for a temporal module, got {}",
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for v in self
            .weight
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.gate.iter_mut())
        {
            *v = it.next().unwrap_or_default();
        }
        Ok(need)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_are_identity() {
        let x = Array3::from_shape_fn((2, 5, 3), |(b, t, c)| (b + t * c) as f64 - 1.5);
        assert_eq!(TemporalGcmParams::zeros(5, 3).calibrate(&x).unwrap(), x);
        assert_eq!(TemporalGcmParams::identity(5, 3, 0.01).calibrate(&x).unwrap(), x);
    }

    #[test]
    fn count_matches_formula() {
        assert_eq!(TemporalGcmParams::zeros(96, 7).param_count(), 7 * 9313);
    }
}

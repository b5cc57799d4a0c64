//! Frequency-domain gated calibration module.
//!
//! Per channel `c`, for a real signal `x` of length `n`:
//!
//! ```text
//! y = x + tanh(α_c) · irfft(rfft(x) ⊙ W[:, c] + B[:, c])
//! ```
//!
//! `W` and `B` are complex `[F × C]` with `F = n/2 + 1`; each complex entry is
//! two real parameters. Imaginary parts on the DC/Nyquist bins are dropped by
//! the inverse transform, so their gradient is always zero; they are still
//! counted as trainable parameters.

use ndarray::{Array1, Array2, Array3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{num_bins, RealFft};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqGcmParams {
    /// Temporal length the module calibrates.
    pub len: usize,
    /// Multiplicative mask `[F × C]`.
    pub weight: Array2<Complex64>,
    /// Additive shift `[F × C]`.
    pub shift: Array2<Complex64>,
    /// Gate pre-activation `[C]`.
    pub gate: Array1<f64>,
}

/// Intermediates kept from the forward pass.
#[derive(Debug, Clone)]
pub struct FreqTape {
    /// `rfft(x)`, `[B × F × C]`.
    pub spectrum: Array3<Complex64>,
    /// Pre-gate correction `irfft(rfft(x) ⊙ W + B)`, `[B × n × C]`.
    pub correction: Array3<f64>,
}

impl FreqGcmParams {
    /// Every parameter zero: the module is exactly the identity.
    pub fn zeros(len: usize, channels: usize) -> Self {
        let bins = num_bins(len);
        FreqGcmParams {
            len,
            weight: Array2::zeros((bins, channels)),
            shift: Array2::zeros((bins, channels)),
            gate: Array1::zeros(channels),
        }
    }

    /// Zero mask and shift with every gate at `gate`; still the identity map,
    /// but with non-vanishing gradients for the mask and shift.
    pub fn identity(len: usize, channels: usize, gate: f64) -> Self {
        let mut p = Self::zeros(len, channels);
        p.gate.fill(gate);
        p
    }

    pub fn channels(&self) -> usize {
        self.gate.len()
    }

    pub fn bins(&self) -> usize {
        num_bins(self.len)
    }

    /// `4·C·F + C`.
    pub fn param_count(&self) -> usize {
        4 * self.channels() * self.bins() + self.channels()
    }

    fn check(&self, x: &Array3<f64>) -> Result<()> {
        let (_, n, c) = x.dim();
        if n != self.len || c != self.channels() {
            return Err(Error::Shape(format!(
                "frequency module calibrates [B × {} × {}], got {:?}",
                self.len,
                self.channels(),
                x.dim()
            )));
        }
        Ok(())
    }

    /// Applies the module to `[B × n × C]`.
    pub fn calibrate(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, FreqTape)> {
        self.check(x)?;
        let (batch, n, channels) = x.dim();
        let bins = self.bins();
        let mut fft = RealFft::new(n);
        let mut spectrum = Array3::zeros((batch, bins, channels));
        let mut correction = Array3::zeros((batch, n, channels));
        let mut out = x.clone();

        let mut lane = vec![0.0; n];
        let mut spec = vec![Complex64::default(); bins];
        let mut masked = vec![Complex64::default(); bins];
        for c in 0..channels {
            let g = self.gate[c].tanh();
            let w = self.weight.column(c);
            let sh = self.shift.column(c);
            for b in 0..batch {
                for (t, v) in lane.iter_mut().enumerate() {
                    *v = x[[b, t, c]];
                }
                fft.forward(&lane, &mut spec);
                for f in 0..bins {
                    spectrum[[b, f, c]] = spec[f];
                    masked[f] = spec[f] * w[f] + sh[f];
                }
                fft.inverse(&masked, &mut lane);
                for (t, r) in lane.iter().enumerate() {
                    correction[[b, t, c]] = *r;
                    out[[b, t, c]] += g * r;
                }
            }
        }
        Ok((out, FreqTape { spectrum, correction }))
    }

    /// Parameter gradients for `grad_out = ∂L/∂y`, and `∂L/∂x` when asked.
    pub fn backward(
        &self,
        tape: &FreqTape,
        grad_out: &Array3<f64>,
        want_input_grad: bool,
    ) -> Result<(FreqGcmParams, Option<Array3<f64>>)> {
        let (batch, n, channels) = grad_out.dim();
        if n != self.len
            || channels != self.channels()
            || tape.correction.dim() != grad_out.dim()
            || tape.spectrum.dim() != (batch, self.bins(), channels)
        {
            return Err(Error::Shape(format!(
                "frequency module backward: gradient {:?} does not match tape {:?}",
                grad_out.dim(),
                tape.correction.dim()
            )));
        }
        let bins = self.bins();
        let mut fft = RealFft::new(n);
        let mut grads = FreqGcmParams::zeros(n, channels);
        let mut grad_in = want_input_grad.then(|| grad_out.clone());

        let mut lane = vec![0.0; n];
        let mut back = vec![0.0; n];
        let mut dz = vec![Complex64::default(); bins];
        let mut dx = vec![Complex64::default(); bins];
        for c in 0..channels {
            let th = self.gate[c].tanh();
            let mut gate_acc = 0.0;
            for b in 0..batch {
                for (t, v) in lane.iter_mut().enumerate() {
                    let g = grad_out[[b, t, c]];
                    gate_acc += g * tape.correction[[b, t, c]];
                    *v = th * g;
                }
                fft.adjoint(&lane, &mut dz);
                for f in 0..bins {
                    let spec = tape.spectrum[[b, f, c]];
                    grads.weight[[f, c]] += spec.conj() * dz[f];
                    grads.shift[[f, c]] += dz[f];
                    dx[f] = self.weight[[f, c]].conj() * dz[f];
                }
                if let Some(gi) = grad_in.as_mut() {
                    fft.forward_transpose(&dx, &mut back);
                    for (t, v) in back.iter().enumerate() {
                        gi[[b, t, c]] += v;
                    }
                }
            }
            grads.gate[c] = (1.0 - th * th) * gate_acc;
        }
        Ok((grads, grad_in))
    }

    /// Appends the real parameters: mask (re, im), shift (re, im), gates.
    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        for z in self.weight.iter().chain(self.shift.iter()) {
            out.push(z.re);
            out.push(z.im);
        }
        out.extend(self.gate.iter().copied());
    }

    /// Reads parameters in [`FreqGcmParams::extend_flat`] order; returns the
    /// number of values consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if flat.len() < need {
            return Err(Error::Shape(format!(
                "need {need} values for a frequency module, got {}",
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for z in self.weight.iter_mut().chain(self.shift.iter_mut()) {
            z.re = it.next().unwrap_or_default();
            z.im = it.next().unwrap_or_default();
        }
        for g in self.gate.iter_mut() {
            *g = it.next().unwrap_or_default();
        }
        Ok(need)
    }

    /// Largest per-channel correction bound `|tanh α_c|·‖correction_c‖∞`.
    pub fn correction_bound(&self, tape: &FreqTape) -> Array1<f64> {
        let mut out = Array1::zeros(self.channels());
        for (c, col) in tape.correction.axis_iter(Axis(2)).enumerate() {
            let sup = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            out[c] = self.gate[c].tanh().abs() * sup;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_x(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_params_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [1, 2, 7, 16, 96] {
            let x = random_x(&mut rng, (3, len, 2));
            let y = FreqGcmParams::zeros(len, 2).calibrate(&x).unwrap();
            assert_eq!(x, y);
            let y = FreqGcmParams::identity(len, 2, 0.5).calibrate(&x).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn single_bin_shift_synthesizes_cosine() {
        let n = 12;
        let mut p = FreqGcmParams::zeros(n, 1);
        p.shift[[1, 0]] = Complex64::new(1.0, 0.0);
        p.gate[0] = 20.0;
        let x = Array3::from_shape_fn((1, n, 1), |(_, t, _)| t as f64 * 0.1);
        let y = p.calibrate(&x).unwrap();
        for t in 0..n {
            // irfft of a unit interior bin is (2/n)·cos(2πt/n).
            let expect = x[[0, t, 0]] + (2.0 / n as f64) * (2.0 * PI * t as f64 / n as f64).cos();
            assert!((y[[0, t, 0]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_signal_zero_shift_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = FreqGcmParams::zeros(9, 2);
        p.weight.mapv_inplace(|_| Complex64::new(rng.random(), rng.random()));
        p.gate.fill(1.3);
        let y = p.calibrate(&Array3::zeros((2, 9, 2))).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_roundtrip_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = FreqGcmParams::zeros(96, 7);
        assert_eq!(p.param_count(), 1379);
        let flat: Vec<f64> = (0..p.param_count()).map(|_| rng.random()).collect();
        assert_eq!(p.load_flat(&flat).unwrap(), flat.len());
        let mut back = Vec::new();
        p.extend_flat(&mut back);
        assert_eq!(back, flat);
    }

    #[test]
    fn gate_bounds_the_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = FreqGcmParams::zeros(10, 2);
        p.weight.mapv_inplace(|_| Complex64::new(rng.random(), rng.random()));
        p.shift.mapv_inplace(|_| Complex64::new(rng.random(), rng.random()));
        p.gate[0] = 0.2;
        p.gate[1] = -1.5;
        let x = random_x(&mut rng, (4, 10, 2));
        let (y, tape) = p.forward(&x).unwrap();
        let bound = p.correction_bound(&tape);
        for ((b, t, c), v) in y.indexed_iter() {
            assert!((v - x[[b, t, c]]).abs() <= bound[c] + 1e-12);
        }
        p.gate.fill(0.0);
        assert_eq!(p.calibrate(&x).unwrap(), x);
    }
}

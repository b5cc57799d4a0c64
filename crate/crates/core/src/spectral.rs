//! One-sided real DFT, its inverse and adjoints, and dominant-period estimation.
//!
//! Convention (used by every module in the crate):
//!
//! * forward: `X[f] = Σ_t x[t]·exp(−2πi·f·t/n)` for `f = 0..=n/2` (unnormalized),
//! * inverse: `x[t] = (1/n)·Σ_{f=0}^{n−1} X[f]·exp(2πi·f·t/n)` with the missing
//!   bins filled in by Hermitian symmetry.
//!
//! Bin 0 is DC and, for even `n`, bin `n/2` is Nyquist. Those two bins are
//! self-conjugate, so the inverse only reads their real parts. [`irfft`]
//! rejects spectra whose DC/Nyquist imaginary parts are not (numerically) zero;
//! [`irfft_lenient`] silently drops them, which is what the calibration modules
//! need because their additive shift is a free complex number on every bin.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Tolerance on the imaginary part of the DC/Nyquist bins, relative to the
/// largest coefficient magnitude (floored at 1).
pub const SELF_CONJUGATE_TOL: f64 = 1e-9;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, Plan>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

type Plan = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

fn plan(len: usize) -> Plan {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry(len)
            .or_insert_with(|| (planner.plan_fft_forward(len), planner.plan_fft_inverse(len)))
            .clone()
    })
}

/// Number of one-sided bins for a signal of length `len`.
#[inline]
pub fn num_bins(len: usize) -> usize {
    len / 2 + 1
}

/// Weight of bin `f` when folding a one-sided spectrum back to full length:
/// 1 for DC (and Nyquist when `len` is even), 2 for interior bins.
#[inline]
pub fn fold_weight(f: usize, len: usize) -> f64 {
    if f == 0 || (len % 2 == 0 && f == len / 2) {
        1.0
    } else {
        2.0
    }
}

#[inline]
fn is_self_conjugate(f: usize, len: usize) -> bool {
    f == 0 || (len % 2 == 0 && f == len / 2)
}

/// Reusable real transform of a fixed length.
///
/// Holds the planned complex FFTs and scratch space so the hot loops in the
/// calibration modules do not allocate.
pub struct RealFft {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl std::fmt::Debug for RealFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealFft").field("len", &self.len).finish()
    }
}

impl Clone for RealFft {
    fn clone(&self) -> Self {
        RealFft::new(self.len)
    }
}

impl RealFft {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "transform length must be at least 1");
        let (forward, inverse) = plan(len);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        RealFft {
            len,
            forward,
            inverse,
            buffer: vec![Complex64::default(); len],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bins(&self) -> usize {
        num_bins(self.len)
    }

    /// One-sided forward transform of `x` into `out`.
    pub fn forward(&mut self, x: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.len);
        debug_assert_eq!(out.len(), self.bins());
        for (b, &v) in self.buffer.iter_mut().zip(x) {
            *b = Complex64::new(v, 0.0);
        }
        self.forward
            .process_with_scratch(&mut self.buffer, &mut self.scratch);
        out.copy_from_slice(&self.buffer[..out.len()]);
        // Exact zeros where the input is real.
        out[0].im = 0.0;
        if self.len % 2 == 0 {
            out[self.len / 2].im = 0.0;
        }
    }

    /// Inverse of [`RealFft::forward`]; imaginary parts of DC/Nyquist are ignored.
    pub fn inverse(&mut self, spectrum: &[Complex64], out: &mut [f64]) {
        debug_assert_eq!(spectrum.len(), self.bins());
        debug_assert_eq!(out.len(), self.len);
        let n = self.len;
        self.buffer[0] = Complex64::new(spectrum[0].re, 0.0);
        for f in 1..self.bins() {
            if is_self_conjugate(f, n) {
                self.buffer[f] = Complex64::new(spectrum[f].re, 0.0);
            } else {
                self.buffer[f] = spectrum[f];
                self.buffer[n - f] = spectrum[f].conj();
            }
        }
        self.inverse
            .process_with_scratch(&mut self.buffer, &mut self.scratch);
        let scale = 1.0 / n as f64;
        for (o, b) in out.iter_mut().zip(&self.buffer) {
            *o = b.re * scale;
        }
    }

    /// Gradient with respect to the one-sided coefficients (real and imaginary
    /// parts as independent parameters) of `⟨inverse(s), g⟩`.
    ///
    /// Interior bins receive `(2/n)·rfft(g)`, DC and Nyquist `(1/n)·Re rfft(g)`.
    pub fn adjoint(&mut self, g: &[f64], out: &mut [Complex64]) {
        self.forward(g, out);
        let n = self.len;
        let inv = 1.0 / n as f64;
        for (f, c) in out.iter_mut().enumerate() {
            *c *= fold_weight(f, n) * inv;
        }
    }

    /// Transpose of the forward transform viewed as a real linear map
    /// `R^n → R^{2F}`: returns `x̄[t] = Σ_f Re(ḡ[f]·exp(2πi·f·t/n))`.
    pub fn forward_transpose(&mut self, g: &[Complex64], out: &mut [f64]) {
        let n = self.len;
        // Σ_f Re(g_f e^{iθ}) equals n·inverse(g') with interior bins halved; the
        // Nyquist/DC terms only contribute their real parts in both expressions.
        let mut halved = g.to_vec();
        for (f, c) in halved.iter_mut().enumerate() {
            *c /= fold_weight(f, n);
        }
        self.inverse(&halved, out);
        for o in out.iter_mut() {
            *o *= n as f64;
        }
    }
}

/// One-sided spectrum of a `[len × C]` real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct OneSidedSpectrum {
    /// `[F × C]` complex coefficients.
    pub coeffs: Array2<Complex64>,
    /// Temporal length of the signal the spectrum came from.
    pub len: usize,
}

impl OneSidedSpectrum {
    /// Forward transform of every column of a `[len × C]` signal.
    pub fn from_signal(x: ArrayView2<'_, f64>) -> Self {
        let (len, channels) = x.dim();
        let mut fft = RealFft::new(len);
        let mut coeffs = Array2::zeros((num_bins(len), channels));
        let mut lane = vec![0.0; len];
        let mut spec = vec![Complex64::default(); num_bins(len)];
        for c in 0..channels {
            for (dst, src) in lane.iter_mut().zip(x.column(c)) {
                *dst = *src;
            }
            fft.forward(&lane, &mut spec);
            for (dst, src) in coeffs.column_mut(c).iter_mut().zip(&spec) {
                *dst = *src;
            }
        }
        OneSidedSpectrum { coeffs, len }
    }

    /// Strict inverse; see [`irfft`].
    pub fn to_signal(&self) -> Result<Array2<f64>> {
        let (bins, channels) = self.coeffs.dim();
        if bins != num_bins(self.len) {
            return Err(Error::Shape(format!(
                "spectrum has {bins} bins, length {} needs {}",
                self.len,
                num_bins(self.len)
            )));
        }
        let mut out = Array2::zeros((self.len, channels));
        for c in 0..channels {
            let col: Vec<Complex64> = self.coeffs.column(c).to_vec();
            let signal = irfft(&col, self.len)?;
            for (dst, src) in out.column_mut(c).iter_mut().zip(signal) {
                *dst = src;
            }
        }
        Ok(out)
    }
}

/// One-sided forward transform of a single real signal.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let mut fft = RealFft::new(x.len());
    let mut out = vec![Complex64::default(); fft.bins()];
    fft.forward(x, &mut out);
    out
}

/// Strict inverse: errors when `spectrum` has the wrong number of bins or a
/// DC/Nyquist bin with a non-negligible imaginary part.
pub fn irfft(spectrum: &[Complex64], len: usize) -> Result<Vec<f64>> {
    if len == 0 || spectrum.len() != num_bins(len) {
        return Err(Error::Shape(format!(
            "spectrum has {} bins, length {len} needs {}",
            spectrum.len(),
            num_bins(len)
        )));
    }
    let scale = spectrum.iter().map(|c| c.norm()).fold(1.0_f64, f64::max);
    for f in [0, len / 2] {
        if is_self_conjugate(f, len) && spectrum[f].im.abs() > SELF_CONJUGATE_TOL * scale {
            return Err(Error::InvalidSpectrum(format!(
                "bin {f} must be real for a real signal of length {len}, imaginary part is {}",
                spectrum[f].im
            )));
        }
    }
    Ok(irfft_lenient(spectrum, len))
}

/// Inverse that drops the imaginary parts of the DC/Nyquist bins.
pub fn irfft_lenient(spectrum: &[Complex64], len: usize) -> Vec<f64> {
    let mut fft = RealFft::new(len);
    let mut out = vec![0.0; len];
    fft.inverse(spectrum, &mut out);
    out
}

/// `∂⟨irfft(s), g⟩/∂s` in the real parameterization of `s`.
pub fn rfft_adjoint(g_time: &[f64]) -> Vec<Complex64> {
    let mut fft = RealFft::new(g_time.len());
    let mut out = vec![Complex64::default(); fft.bins()];
    fft.adjoint(g_time, &mut out);
    out
}

/// Forward transform along axis 1 of a `[B × len × C]` tensor.
pub fn rfft_tensor(x: &Array3<f64>) -> Array3<Complex64> {
    let (batch, len, channels) = x.dim();
    let mut fft = RealFft::new(len);
    let mut out = Array3::zeros((batch, num_bins(len), channels));
    let mut lane = vec![0.0; len];
    let mut spec = vec![Complex64::default(); num_bins(len)];
    for (xs, mut os) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for c in 0..channels {
            for (dst, src) in lane.iter_mut().zip(xs.column(c)) {
                *dst = *src;
            }
            fft.forward(&lane, &mut spec);
            for (dst, src) in os.column_mut(c).iter_mut().zip(&spec) {
                *dst = *src;
            }
        }
    }
    out
}

/// Lenient inverse along axis 1 of a `[B × F × C]` spectrum tensor.
pub fn irfft_tensor(s: &Array3<Complex64>, len: usize) -> Result<Array3<f64>> {
    let (batch, bins, channels) = s.dim();
    if bins != num_bins(len) {
        return Err(Error::Shape(format!(
            "spectrum has {bins} bins, length {len} needs {}",
            num_bins(len)
        )));
    }
    let mut fft = RealFft::new(len);
    let mut out = Array3::zeros((batch, len, channels));
    let mut lane = vec![0.0; len];
    let mut spec = vec![Complex64::default(); bins];
    for (ss, mut os) in s.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for c in 0..channels {
            for (dst, src) in spec.iter_mut().zip(ss.column(c)) {
                *dst = *src;
            }
            fft.inverse(&spec, &mut lane);
            for (dst, src) in os.column_mut(c).iter_mut().zip(&lane) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

/// Dominant period of a `[T × C]` (already normalized) training block.
///
/// Picks the non-DC bin with the largest channel-averaged amplitude, converts
/// it to a period `round(T / f*)` and clamps into `[2, T/2]`. Ties resolve to
/// the lowest frequency.
pub fn estimate_dominant_period(train_values: ArrayView2<'_, f64>) -> Result<usize> {
    let (len, channels) = train_values.dim();
    if len < 4 {
        return Err(Error::TooShort { rows: len, needed: 4 });
    }
    let spectrum = OneSidedSpectrum::from_signal(train_values);
    let mut best = (1usize, f64::NEG_INFINITY);
    for f in 1..spectrum.coeffs.nrows() {
        let amp: f64 =
            spectrum.coeffs.row(f).iter().map(|c| c.norm()).sum::<f64>() / channels.max(1) as f64;
        if amp > best.1 {
            best = (f, amp);
        }
    }
    let period = (len as f64 / best.0 as f64).round() as usize;
    Ok(period.clamp(2, len / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn dc_only_signal() {
        let s = rfft(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(s.len(), 3);
        assert_abs_diff_eq!(s[0].re, 4.0, epsilon = 1e-12);
        for c in &s[1..] {
            assert!(c.norm() < 1e-12);
        }
        assert_eq!(s[0].im, 0.0);
    }

    #[test]
    fn single_bin_cosine() {
        let x: Vec<f64> = (0..8).map(|t| (2.0 * PI * t as f64 / 8.0).cos()).collect();
        let s = rfft(&x);
        assert_abs_diff_eq!(s[1].re, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1].im, 0.0, epsilon = 1e-12);
        for (f, c) in s.iter().enumerate() {
            if f != 1 {
                assert!(c.norm() < 1e-12, "bin {f} = {c}");
            }
        }
    }

    #[test]
    fn zero_spectrum_is_zero_signal() {
        let x = irfft(&[Complex64::default(); 5], 8).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn strict_inverse_rejects_complex_dc_and_nyquist() {
        let mut s = vec![Complex64::default(); 5];
        s[0].im = 1e-3;
        assert!(matches!(irfft(&s, 8), Err(Error::InvalidSpectrum(_))));
        let mut s = vec![Complex64::default(); 5];
        s[4].im = 1e-3;
        assert!(matches!(irfft(&s, 8), Err(Error::InvalidSpectrum(_))));
        // Odd length: last bin is interior, imaginary part is fine.
        let mut s = vec![Complex64::default(); 4];
        s[3].im = 1e-3;
        assert!(irfft(&s, 7).is_ok());
        assert!(matches!(irfft(&s, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn degenerate_length_one() {
        let s = rfft(&[2.5]);
        assert_eq!(s, vec![Complex64::new(2.5, 0.0)]);
        assert_eq!(irfft(&s, 1).unwrap(), vec![2.5]);
        assert_eq!(rfft_adjoint(&[0.75]), vec![Complex64::new(0.75, 0.0)]);
    }

    #[test]
    fn zero_gradient_adjoint() {
        assert!(rfft_adjoint(&[0.0; 9]).iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn sine_period_24() {
        let t_len = 2400;
        let x = Array2::from_shape_fn((t_len, 2), |(t, c)| {
            (2.0 * PI * t as f64 / 24.0 + c as f64).sin()
        });
        assert_eq!(estimate_dominant_period(x.view()).unwrap(), 24);
    }

    #[test]
    fn daily_cycle_at_quarter_hour_resolution() {
        // 15-minute sampling: one day is 96 steps, PAAS batch is 97.
        let t_len = 96 * 120;
        let x = Array2::from_shape_fn((t_len, 3), |(t, c)| {
            let day = 2.0 * PI * t as f64 / 96.0;
            day.sin() + 0.3 * (2.0 * day + c as f64).cos() + 0.01 * (t as f64 * 0.37).sin()
        });
        let p = estimate_dominant_period(x.view()).unwrap();
        assert_eq!(p, 96);
        assert_eq!(p + 1, 97);
    }

    #[test]
    fn period_is_clamped() {
        // Alternating signal peaks at Nyquist: period 2.
        let x = Array2::from_shape_fn((10, 1), |(t, _)| if t % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(estimate_dominant_period(x.view()).unwrap(), 2);
        // Slowest possible oscillation over a short block: period T/f = T > T/2.
        let x = Array2::from_shape_fn((8, 1), |(t, _)| (2.0 * PI * t as f64 / 8.0).cos());
        assert_eq!(estimate_dominant_period(x.view()).unwrap(), 4);
        assert!(estimate_dominant_period(Array2::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let x = Array3::from_shape_fn((2, 7, 3), |(b, t, c)| (b * 31 + t * 7 + c) as f64 * 0.1);
        let s = rfft_tensor(&x);
        assert_eq!(s.dim(), (2, 4, 3));
        let y = irfft_tensor(&s, 7).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

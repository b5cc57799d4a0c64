//! Adam with bias correction over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First/second moment accumulators, one entry per scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters and state are untouched.
    SkippedNonFinite,
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "Adam: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        let out = adam_step(&mut p, &[1.0], &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(out, StepOutcome::Applied);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_keeps_params_and_counts() {
        let mut p = [0.5, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, [0.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_grad_skips() {
        let mut p = [0.5];
        let mut st = AdamState::new(1);
        let out = adam_step(&mut p, &[f64::NAN], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, [0.5]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = [0.5];
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut st, &AdamConfig::default()).is_err());
    }

    /// Independent scalar Adam written from the textbook recurrences.
    fn reference(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let k = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let step = lr * (m / (1.0 - b1.powf(k))) / ((v / (1.0 - b2.powf(k))).sqrt() + eps);
            x -= step;
        }
        x
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let grads: Vec<f64> = (0..100)
            .map(|i| ((i as f64) * 0.37).sin() * 2.0 + 0.1)
            .collect();
        let hyper = AdamConfig {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-6,
        };
        let mut p = [0.0];
        let mut st = AdamState::new(1);
        for g in &grads {
            adam_step(&mut p, &[*g], &mut st, &hyper).unwrap();
        }
        let expected = reference(&grads, 0.01, 0.8, 0.99, 1e-6);
        assert!((p[0] - expected).abs() < 1e-12, "{} vs {expected}", p[0]);
    }
}

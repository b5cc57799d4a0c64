mod common;

use common::{gradient_error, random_adapter, random_dlinear, random_linear, random_tensor, rng};
use freqcal_core::adapter::{adapter_backward, adapter_forward, AdapterKind, CalibrationModule};
use freqcal_core::forecaster::ForecasterModel;

fn check(kind: AdapterKind, use_input: bool, lookback: usize, horizon: usize, seed: u64) {
    let channels = 2;
    let mut r = rng(seed);
    let models = [
        random_linear(&mut r, lookback, horizon, channels),
        random_dlinear(&mut r, lookback, horizon, channels),
        ForecasterModel::naive(lookback, horizon, channels),
    ];
    for model in &models {
        let state = random_adapter(&mut r, kind, use_input, channels, lookback, horizon, 0.5);
        let x = random_tensor(&mut r, (3, lookback, channels));
        let cot = random_tensor(&mut r, (3, horizon, channels));
        let (err, probes) = gradient_error(&state, model, &x, &cot);
        assert!(probes >= 50, "only {probes} parameters");
        assert!(
            err < 1e-6,
            "{kind} input={use_input} {:?} L={lookback} H={horizon}: relative error {err:e}",
            model.kind()
        );
    }
}

#[test]
fn frequency_modules_match_finite_differences() {
    check(AdapterKind::Fac, true, 8, 6, 1);
    check(AdapterKind::Fac, true, 9, 7, 2);
    check(AdapterKind::Fac, false, 8, 24, 3);
}

#[test]
fn temporal_modules_match_finite_differences() {
    check(AdapterKind::TemporalGcm, true, 6, 5, 4);
    check(AdapterKind::TemporalGcm, false, 6, 7, 5);
}

#[test]
fn structurally_dead_coefficients_get_zero_gradient() {
    let mut r = rng(9);
    let model = random_linear(&mut r, 8, 6, 1);
    let state = random_adapter(&mut r, AdapterKind::Fac, true, 1, 8, 6, 0.5);
    let x = random_tensor(&mut r, (2, 8, 1));
    let cot = random_tensor(&mut r, (2, 6, 1));
    let (_, tape) = adapter_forward(&state, &model, &x).unwrap();
    let g = adapter_backward(&state, &model, &tape, &cot).unwrap();
    let CalibrationModule::Freq(out) = &g.output else {
        panic!("expected a frequency module");
    };
    for f in [0, 3] {
        assert_eq!(out.weight[[f, 0]].im, 0.0);
        assert_eq!(out.shift[[f, 0]].im, 0.0);
    }
}

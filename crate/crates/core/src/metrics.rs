//! Pointwise error metrics over equally shaped tensors.

use ndarray::{ArrayBase, Data, Dimension};

/// Mean squared error over every element.
pub fn mse<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> f64
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    assert_eq!(pred.shape(), target.shape(), "mse: shape mismatch");
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Mean absolute error over every element.
pub fn mae<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> f64
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    assert_eq!(pred.shape(), target.shape(), "mae: shape mismatch");
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n
}

//! Central finite-difference gradient checking.
//!
//! The checker evaluates a scalar loss twice per element (at `x ± h`) and
//! never touches the analytic backward path, so it serves as the independent
//! route when validating layer gradients. Inputs must be extended precision;
//! 32-bit rounding noise would swamp the differences.

use crate::error::{Error, Result};
use crate::numcore::{Precision, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `loss` with respect to `x` by central differences.
pub fn central_diff<F>(x: &Tensor, mut loss: F, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if x.precision() != Precision::Extended {
        return Err(Error::Arg(
            "gradient checking requires extended precision".into(),
        ));
    }
    let mut grad = vec![0.0f64; x.len()];
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = loss(&Tensor::from_data(x.shape(), probe.clone(), Precision::Extended)?)?;
        probe[i] = orig - h;
        let minus = loss(&Tensor::from_data(x.shape(), probe.clone(), Precision::Extended)?)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::from_data(x.shape(), grad, Precision::Extended)
}

/// Largest element-wise relative error between an analytic and a numeric
/// gradient. The denominator is floored at 1e-6 so near-zero pairs compare
/// absolutely rather than blowing up on finite-difference noise.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Dim(format!(
            "gradient shapes differ: {:?} vs {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

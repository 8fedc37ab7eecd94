//! Element-wise activations with their backward passes.

use crate::error::Result;
use crate::numcore::Tensor;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ReLU forward; the cache is the pre-activation input.
pub fn relu_fwd(x: &Tensor) -> Result<(Tensor, ReluCache)> {
    let y = x.map(|v| v.max(0.0))?;
    Ok((y, ReluCache { input: x.clone() }))
}

#[derive(Debug, Clone)]
pub struct ReluCache {
    input: Tensor,
}

pub fn relu_bwd(dy: &Tensor, cache: &ReluCache) -> Result<Tensor> {
    let mask = cache.input.map(|v| if v > 0.0 { 1.0 } else { 0.0 })?;
    dy.mul(&mask)
}

/// Sigmoid forward; the cache is the output (its derivative is y(1-y)).
pub fn sigmoid_fwd(x: &Tensor) -> Result<(Tensor, SigmoidCache)> {
    let y = x.map(sigmoid)?;
    Ok((y.clone(), SigmoidCache { output: y }))
}

#[derive(Debug, Clone)]
pub struct SigmoidCache {
    output: Tensor,
}

pub fn sigmoid_bwd(dy: &Tensor, cache: &SigmoidCache) -> Result<Tensor> {
    let deriv = cache.output.map(|y| y * (1.0 - y))?;
    dy.mul(&deriv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err, DEFAULT_STEP};
    use crate::numcore::{Precision, Rng};

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_data(&[2], vec![-1.0, 2.0], Precision::Extended).unwrap();
        let (y, _) = relu_fwd(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::zeros(&[1], Precision::Extended);
        let (y, _) = sigmoid_fwd(&x).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        for shape in [vec![6], vec![2, 5], vec![2, 3, 4]] {
            let x = rng
                .uniform_tensor(&shape, -2.0, 2.0, Precision::Extended)
                .unwrap();
            let dy = rng
                .uniform_tensor(&shape, -1.0, 1.0, Precision::Extended)
                .unwrap();

            let (_, cache) = relu_fwd(&x).unwrap();
            let analytic = relu_bwd(&dy, &cache).unwrap();
            let dy_fd = dy.clone();
            let numeric = central_diff(
                &x,
                move |probe| {
                    let (y, _) = relu_fwd(probe)?;
                    Ok(y.data().iter().zip(dy_fd.data()).map(|(a, b)| a * b).sum())
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(max_rel_err(&analytic, &numeric).unwrap() < 1e-4);

            let (_, cache) = sigmoid_fwd(&x).unwrap();
            let analytic = sigmoid_bwd(&dy, &cache).unwrap();
            let dy_fd = dy.clone();
            let numeric = central_diff(
                &x,
                move |probe| {
                    let (y, _) = sigmoid_fwd(probe)?;
                    Ok(y.data().iter().zip(dy_fd.data()).map(|(a, b)| a * b).sum())
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(max_rel_err(&analytic, &numeric).unwrap() < 1e-4);
        }
    }
}

//! Batch normalization over the channel axis.
//!
//! Accepts `[batch, time, channels]` sequences (statistics taken jointly
//! over batch and time) or `[batch, channels]` feature vectors. Train mode
//! normalizes with batch statistics and folds them into the running
//! estimates, `running <- (1 - m) * running + m * batch`; eval mode uses the
//! running estimates unchanged.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::numcore::{Precision, Tensor};

#[derive(Debug, Clone)]
pub struct BatchNormState {
    /// Scale, `[channels]`.
    pub gamma: Tensor,
    /// Shift, `[channels]`.
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn init(channels: usize, momentum: f64, epsilon: f64, precision: Precision) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Arg(format!(
                "batchnorm momentum {momentum} must lie in [0, 1)"
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::Arg(format!(
                "batchnorm epsilon {epsilon} must be positive"
            )));
        }
        Ok(BatchNormState {
            gamma: Tensor::full(&[channels], 1.0, precision),
            beta: Tensor::zeros(&[channels], precision),
            running_mean: Tensor::zeros(&[channels], precision),
            running_var: Tensor::full(&[channels], 1.0, precision),
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized input, same shape as x.
    xhat: Tensor,
    /// Per-channel 1 / sqrt(var + eps) from the batch statistics.
    inv_std: Vec<f64>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Views a 2-d or 3-d tensor as `(rows, channels)` with channels last.
fn as_rows(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [b, c] => Ok((b, c)),
        [b, t, c] => Ok((b * t, c)),
        ref other => Err(Error::Dim(format!(
            "batchnorm expects a 2-d or 3-d tensor, got {other:?}"
        ))),
    }
}

pub fn forward(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<(Tensor, BnCache)> {
    let (rows, channels) = as_rows(x)?;
    if channels != state.channels() {
        return Err(Error::Dim(format!(
            "batchnorm: input has {channels} channels, state has {}",
            state.channels()
        )));
    }
    let eps = state.epsilon;
    let xd = x.data();
    let precision = x.precision();

    let (mean, var) = match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::Arg(format!(
                    "batchnorm train mode needs at least 2 samples per channel, got {rows}"
                )));
            }
            let mut mean = vec![0.0f64; channels];
            for r in 0..rows {
                for c in 0..channels {
                    mean[c] += xd[r * channels + c];
                }
            }
            for m in &mut mean {
                *m /= rows as f64;
            }
            let mut var = vec![0.0f64; channels];
            for r in 0..rows {
                for c in 0..channels {
                    let d = xd[r * channels + c] - mean[c];
                    var[c] += d * d;
                }
            }
            for v in &mut var {
                *v /= rows as f64;
            }
            // Fold batch statistics into the running estimates.
            let m = state.momentum;
            let mut rm = state.running_mean.data().to_vec();
            let mut rv = state.running_var.data().to_vec();
            for c in 0..channels {
                rm[c] = (1.0 - m) * rm[c] + m * mean[c];
                rv[c] = (1.0 - m) * rv[c] + m * var[c];
            }
            state.running_mean = Tensor::from_data(&[channels], rm, precision)?;
            state.running_var = Tensor::from_data(&[channels], rv, precision)?;
            (mean, var)
        }
        Mode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let gd = state.gamma.data();
    let bd = state.beta.data();
    let mut xhat = vec![0.0f64; xd.len()];
    let mut out = vec![0.0f64; xd.len()];
    for r in 0..rows {
        for c in 0..channels {
            let i = r * channels + c;
            let h = (xd[i] - mean[c]) * inv_std[c];
            xhat[i] = h;
            out[i] = gd[c] * h + bd[c];
        }
    }
    let y = Tensor::from_data(x.shape(), out, precision)?;
    let xhat = Tensor::from_data(x.shape(), xhat, precision)?;
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

pub fn backward(dy: &Tensor, cache: &BnCache, state: &BatchNormState) -> Result<BnGrads> {
    if cache.mode != Mode::Train {
        return Err(Error::Contract(
            "batchnorm backward requires a train-mode cache".into(),
        ));
    }
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::Contract(format!(
            "batchnorm backward: gradient shape {:?} does not match cached forward {:?}",
            dy.shape(),
            cache.xhat.shape()
        )));
    }
    let (rows, channels) = as_rows(dy)?;
    let gd = dy.data();
    let hd = cache.xhat.data();
    let gamma = state.gamma.data();
    let n = rows as f64;

    let mut sum_dy = vec![0.0f64; channels];
    let mut sum_dy_xhat = vec![0.0f64; channels];
    for r in 0..rows {
        for c in 0..channels {
            let i = r * channels + c;
            sum_dy[c] += gd[i];
            sum_dy_xhat[c] += gd[i] * hd[i];
        }
    }
    // dx = gamma * inv_std / N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
    let mut dx = vec![0.0f64; gd.len()];
    for r in 0..rows {
        for c in 0..channels {
            let i = r * channels + c;
            dx[i] = gamma[c] * cache.inv_std[c] / n
                * (n * gd[i] - sum_dy[c] - hd[i] * sum_dy_xhat[c]);
        }
    }
    let precision = dy.precision();
    Ok(BnGrads {
        input: Tensor::from_data(dy.shape(), dx, precision)?,
        gamma: Tensor::from_data(&[channels], sum_dy_xhat, precision)?,
        beta: Tensor::from_data(&[channels], sum_dy, precision)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err, DEFAULT_STEP};
    use crate::numcore::Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = Rng::new(14);
        let mut state = BatchNormState::init(3, 0.1, 1e-5, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[4, 10, 3], -3.0, 5.0, Precision::Extended)
            .unwrap();
        let (y, _) = forward(&x, &mut state, Mode::Train).unwrap();
        let rows = 40;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for r in 0..rows {
                mean += y.data()[r * 3 + c];
            }
            mean /= rows as f64;
            for r in 0..rows {
                let d = y.data()[r * 3 + c] - mean;
                var += d * d;
            }
            var /= rows as f64;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel {c} var {var}");
        }
    }

    #[test]
    fn gamma_beta_rescale_standardized_input() {
        let mut state = BatchNormState::init(1, 0.1, 1e-12, Precision::Extended).unwrap();
        state.gamma = Tensor::full(&[1], 2.0, Precision::Extended);
        state.beta = Tensor::full(&[1], 3.0, Precision::Extended);
        // Input already standardized: mean 0, population variance 1.
        let x = Tensor::from_data(&[2, 1], vec![-1.0, 1.0], Precision::Extended).unwrap();
        let (y, _) = forward(&x, &mut state, Mode::Train).unwrap();
        let mean = (y.data()[0] + y.data()[1]) / 2.0;
        let std = ((y.data()[0] - mean).powi(2) + (y.data()[1] - mean).powi(2)) / 2.0;
        assert!((mean - 3.0).abs() < 1e-6);
        assert!((std.sqrt() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn eval_mode_with_unit_running_stats_is_identity() {
        let mut state = BatchNormState::init(2, 0.1, 1e-12, Precision::Extended).unwrap();
        let x = Tensor::from_data(&[3, 2], vec![0.5, -1.0, 2.0, 0.0, -0.25, 1.5], Precision::Extended)
            .unwrap();
        let (y, _) = forward(&x, &mut state, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_sample_train_mode_is_rejected() {
        let mut state = BatchNormState::init(2, 0.1, 1e-5, Precision::Extended).unwrap();
        let x = Tensor::zeros(&[1, 2], Precision::Extended);
        assert!(matches!(
            forward(&x, &mut state, Mode::Train).unwrap_err(),
            Error::Arg(_)
        ));
    }

    #[test]
    fn eval_cache_refused_by_backward() {
        let mut state = BatchNormState::init(2, 0.1, 1e-5, Precision::Extended).unwrap();
        let x = Tensor::zeros(&[3, 2], Precision::Extended);
        let (y, cache) = forward(&x, &mut state, Mode::Eval).unwrap();
        assert!(matches!(
            backward(&y, &cache, &state).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut state = BatchNormState::init(1, 0.5, 1e-5, Precision::Extended).unwrap();
        let x = Tensor::from_data(&[2, 1], vec![0.0, 4.0], Precision::Extended).unwrap();
        forward(&x, &mut state, Mode::Train).unwrap();
        // batch mean 2, batch var 4; running starts at (0, 1).
        assert!((state.running_mean.data()[0] - 1.0).abs() < 1e-12);
        assert!((state.running_var.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(77);
        for shape in [vec![4, 3], vec![2, 5, 2], vec![3, 4, 4]] {
            let channels = *shape.last().unwrap();
            let mut state = BatchNormState::init(channels, 0.1, 1e-5, Precision::Extended).unwrap();
            state.gamma = rng
                .uniform_tensor(&[channels], 0.5, 1.5, Precision::Extended)
                .unwrap();
            state.beta = rng
                .uniform_tensor(&[channels], -0.5, 0.5, Precision::Extended)
                .unwrap();
            let x = rng
                .uniform_tensor(&shape, -2.0, 2.0, Precision::Extended)
                .unwrap();
            let dy = rng
                .uniform_tensor(&shape, -1.0, 1.0, Precision::Extended)
                .unwrap();
            let (_, cache) = forward(&x, &mut state.clone(), Mode::Train).unwrap();
            let grads = backward(&dy, &cache, &state).unwrap();

            let loss_with = |gamma: &Tensor, beta: &Tensor, input: &Tensor| -> Result<f64> {
                let mut s2 = state.clone();
                s2.gamma = gamma.clone();
                s2.beta = beta.clone();
                let (y, _) = forward(input, &mut s2, Mode::Train)?;
                Ok(y.data().iter().zip(dy.data()).map(|(a, g)| a * g).sum())
            };

            let num = central_diff(&x, |xi| loss_with(&state.gamma, &state.beta, xi), DEFAULT_STEP)
                .unwrap();
            assert!(max_rel_err(&grads.input, &num).unwrap() < 1e-4, "input grad");
            let num = central_diff(&state.gamma, |g| loss_with(g, &state.beta, &x), DEFAULT_STEP)
                .unwrap();
            assert!(max_rel_err(&grads.gamma, &num).unwrap() < 1e-4, "gamma grad");
            let num = central_diff(&state.beta, |b| loss_with(&state.gamma, b, &x), DEFAULT_STEP)
                .unwrap();
            assert!(max_rel_err(&grads.beta, &num).unwrap() < 1e-4, "beta grad");
        }
    }
}

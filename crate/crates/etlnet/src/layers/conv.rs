//! Dilated causal 1-d convolution, the building block of a TCN layer.
//!
//! Output `y[b, t, f] = bias[f] + sum_c sum_j w[f, c, j] * x[b, t - j*d, c]`
//! with implicit zeros left of the sequence, so tap `j` looks `j*d` samples
//! into the past and the output time extent equals the input time extent.
//! Nothing at time `t` depends on inputs later than `t`.

use crate::error::{Error, Result};
use crate::numcore::{Precision, Rng, Tensor};

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `[out_ch, in_ch, kernel]`.
    pub weight: Tensor,
    /// `[out_ch]`.
    pub bias: Tensor,
    pub dilation: usize,
    pub kernel: usize,
}

impl ConvParams {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut Rng,
        precision: Precision,
    ) -> Result<Self> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::Arg(format!(
                "conv: kernel {kernel} and dilation {dilation} must be >= 1"
            )));
        }
        let fan_in = in_ch * kernel;
        let fan_out = out_ch * kernel;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(ConvParams {
            weight: rng.uniform_tensor(&[out_ch, in_ch, kernel], -limit, limit, precision)?,
            bias: Tensor::zeros(&[out_ch], precision),
            dilation,
            kernel,
        })
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input: Tensor,
    // Fingerprint of the params used in the forward call, so a mismatched
    // cache/params pair is caught instead of silently producing garbage.
    weight_shape: Vec<usize>,
    dilation: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn forward(x: &Tensor, p: &ConvParams) -> Result<(Tensor, ConvCache)> {
    let (batch, time, c_in) = x.dim3()?;
    if c_in != p.in_ch() {
        return Err(Error::Dim(format!(
            "conv: input has {c_in} channels but weight is {:?}",
            p.weight.shape()
        )));
    }
    let c_out = p.out_ch();
    let k = p.kernel;
    let d = p.dilation;
    let xd = x.data();
    let wd = p.weight.data();
    let bd = p.bias.data();
    let mut out = vec![0.0f64; batch * time * c_out];
    for b in 0..batch {
        for t in 0..time {
            let orow = &mut out[(b * time + t) * c_out..(b * time + t + 1) * c_out];
            for (f, o) in orow.iter_mut().enumerate() {
                let mut acc = bd[f];
                for j in 0..k {
                    let offset = j * d;
                    if offset > t {
                        break; // earlier taps fall off the left edge
                    }
                    let tau = t - offset;
                    let xrow = &xd[(b * time + tau) * c_in..(b * time + tau + 1) * c_in];
                    let wrow = &wd[(f * c_in) * k + j..];
                    for (c, &xv) in xrow.iter().enumerate() {
                        acc += wrow[c * k] * xv;
                    }
                }
                *o = acc;
            }
        }
    }
    let y = Tensor::from_data(&[batch, time, c_out], out, x.precision())?;
    Ok((
        y,
        ConvCache {
            input: x.clone(),
            weight_shape: p.weight.shape().to_vec(),
            dilation: d,
        },
    ))
}

pub fn backward(dy: &Tensor, cache: &ConvCache, p: &ConvParams) -> Result<ConvGrads> {
    if cache.weight_shape != p.weight.shape() || cache.dilation != p.dilation {
        return Err(Error::Contract(format!(
            "conv backward: cache was built for weight {:?} dilation {}, got weight {:?} dilation {}",
            cache.weight_shape,
            cache.dilation,
            p.weight.shape(),
            p.dilation
        )));
    }
    let (batch, time, c_in) = cache.input.dim3()?;
    let (db, dt, c_out) = dy.dim3()?;
    if (db, dt) != (batch, time) || c_out != p.out_ch() {
        return Err(Error::Contract(format!(
            "conv backward: upstream gradient {:?} does not match cached forward [{batch}, {time}, {}]",
            dy.shape(),
            p.out_ch()
        )));
    }
    let k = p.kernel;
    let d = p.dilation;
    let xd = cache.input.data();
    let wd = p.weight.data();
    let gd = dy.data();

    let mut d_w = vec![0.0f64; c_out * c_in * k];
    let mut d_b = vec![0.0f64; c_out];
    let mut d_x = vec![0.0f64; batch * time * c_in];
    for b in 0..batch {
        for t in 0..time {
            let grow = &gd[(b * time + t) * c_out..(b * time + t + 1) * c_out];
            for (f, &g) in grow.iter().enumerate() {
                d_b[f] += g;
                for j in 0..k {
                    let offset = j * d;
                    if offset > t {
                        break;
                    }
                    let tau = t - offset;
                    let xrow = &xd[(b * time + tau) * c_in..(b * time + tau + 1) * c_in];
                    let dxrow = &mut d_x[(b * time + tau) * c_in..(b * time + tau + 1) * c_in];
                    for c in 0..c_in {
                        let wi = (f * c_in + c) * k + j;
                        d_w[wi] += g * xrow[c];
                        dxrow[c] += g * wd[wi];
                    }
                }
            }
        }
    }
    let precision = cache.input.precision();
    Ok(ConvGrads {
        input: Tensor::from_data(&[batch, time, c_in], d_x, precision)?,
        weight: Tensor::from_data(&[c_out, c_in, k], d_w, precision)?,
        bias: Tensor::from_data(&[c_out], d_b, precision)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err, DEFAULT_STEP};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_data(shape, data.to_vec(), Precision::Extended).unwrap()
    }

    fn single_channel(p_w: &[f64], dilation: usize) -> ConvParams {
        ConvParams {
            weight: t(&[1, 1, p_w.len()], p_w),
            bias: Tensor::zeros(&[1], Precision::Extended),
            dilation,
            kernel: p_w.len(),
        }
    }

    #[test]
    fn identity_kernel() {
        let p = single_channel(&[1.0], 1);
        let x = t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let (y, _) = forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_convolution_with_left_pad() {
        // y[t] = x[t] + x[t-1] with x[-1] = 0.
        let p = single_channel(&[1.0, 1.0], 1);
        let x = t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let (y, _) = forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn dilation_two_skips_a_sample() {
        // y[t] = x[t] + x[t-2].
        let p = single_channel(&[1.0, 1.0], 2);
        let x = t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let (y, _) = forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn output_length_equals_input_length() {
        let mut rng = Rng::new(2);
        for k in [1usize, 2, 3] {
            for d in [1usize, 2, 4] {
                let p = ConvParams::init(3, 5, k, d, &mut rng, Precision::Extended).unwrap();
                let x = rng
                    .uniform_tensor(&[2, 9, 3], -1.0, 1.0, Precision::Extended)
                    .unwrap();
                let (y, _) = forward(&x, &p).unwrap();
                assert_eq!(y.shape(), &[2, 9, 5]);
            }
        }
    }

    #[test]
    fn causality_under_mutation() {
        let mut rng = Rng::new(13);
        for k in [1usize, 2, 3] {
            for d in [1usize, 2, 4] {
                let p = ConvParams::init(2, 3, k, d, &mut rng, Precision::Extended).unwrap();
                let x = rng
                    .uniform_tensor(&[1, 10, 2], -1.0, 1.0, Precision::Extended)
                    .unwrap();
                let (y, _) = forward(&x, &p).unwrap();
                // Perturb the input at a late time step; outputs before it must not move.
                for t_mut in 1..10usize {
                    let mut data = x.data().to_vec();
                    data[(t_mut) * 2] += 10.0;
                    data[(t_mut) * 2 + 1] -= 7.0;
                    let x2 = t(&[1, 10, 2], &data);
                    let (y2, _) = forward(&x2, &p).unwrap();
                    for tt in 0..t_mut {
                        for f in 0..3 {
                            assert_eq!(
                                y.data()[(tt) * 3 + f],
                                y2.data()[(tt) * 3 + f],
                                "k={k} d={d} t={tt} mutated={t_mut}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut rng = Rng::new(0);
        let p = ConvParams::init(3, 4, 2, 1, &mut rng, Precision::Extended).unwrap();
        let x = Tensor::zeros(&[1, 5, 2], Precision::Extended);
        assert!(matches!(forward(&x, &p).unwrap_err(), Error::Dim(_)));
    }

    #[test]
    fn mismatched_cache_is_a_contract_error() {
        let mut rng = Rng::new(4);
        let p = ConvParams::init(2, 2, 3, 2, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[1, 6, 2], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (y, cache) = forward(&x, &p).unwrap();
        let other = ConvParams::init(2, 2, 3, 1, &mut rng, Precision::Extended).unwrap();
        assert!(matches!(
            backward(&y, &cache, &other).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(6);
        let p = ConvParams::init(2, 3, 2, 1, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[1, 5, 2], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (y, cache) = forward(&x, &p).unwrap();
        let dy = Tensor::zeros(y.shape(), Precision::Extended);
        let grads = backward(&dy, &cache, &p).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_upstream_sum() {
        let mut rng = Rng::new(9);
        let p = ConvParams::init(2, 3, 3, 2, &mut rng, Precision::Extended).unwrap();
        let x = rng
            .uniform_tensor(&[2, 7, 2], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let (_, cache) = forward(&x, &p).unwrap();
        let dy = rng
            .uniform_tensor(&[2, 7, 3], -1.0, 1.0, Precision::Extended)
            .unwrap();
        let grads = backward(&dy, &cache, &p).unwrap();
        for f in 0..3 {
            let mut want = 0.0;
            for b in 0..2 {
                for t in 0..7 {
                    want += dy.data()[(b * 7 + t) * 3 + f];
                }
            }
            assert!((grads.bias.data()[f] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(30);
        for (b, t_len, c_in, c_out, k, d) in
            [(1, 8, 2, 3, 3, 2), (2, 6, 1, 2, 2, 1), (1, 9, 3, 2, 3, 4)]
        {
            let p = ConvParams::init(c_in, c_out, k, d, &mut rng, Precision::Extended).unwrap();
            let x = rng
                .uniform_tensor(&[b, t_len, c_in], -1.0, 1.0, Precision::Extended)
                .unwrap();
            let dy = rng
                .uniform_tensor(&[b, t_len, c_out], -1.0, 1.0, Precision::Extended)
                .unwrap();
            let (_, cache) = forward(&x, &p).unwrap();
            let grads = backward(&dy, &cache, &p).unwrap();

            let loss_with = |w: &Tensor, bias: &Tensor, input: &Tensor| -> Result<f64> {
                let p2 = ConvParams {
                    weight: w.clone(),
                    bias: bias.clone(),
                    dilation: d,
                    kernel: k,
                };
                let (y, _) = forward(input, &p2)?;
                Ok(y.data().iter().zip(dy.data()).map(|(a, g)| a * g).sum())
            };

            let num = central_diff(&p.weight, |w| loss_with(w, &p.bias, &x), DEFAULT_STEP).unwrap();
            assert!(max_rel_err(&grads.weight, &num).unwrap() < 1e-4);
            let num = central_diff(&p.bias, |bv| loss_with(&p.weight, bv, &x), DEFAULT_STEP).unwrap();
            assert!(max_rel_err(&grads.bias, &num).unwrap() < 1e-4);
            let num = central_diff(&x, |xi| loss_with(&p.weight, &p.bias, xi), DEFAULT_STEP).unwrap();
            assert!(max_rel_err(&grads.input, &num).unwrap() < 1e-4);
        }
    }
}

//! Inverted dropout: train mode zeroes each element with probability `rate`
//! and scales survivors by `1/(1-rate)`, so eval mode is a pure identity.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::numcore::{Rng, Tensor};

#[derive(Debug, Clone)]
pub struct DropoutCache {
    /// Per-element multiplier (0 or 1/(1-rate)); absent in eval mode.
    mask: Option<Tensor>,
    mode: Mode,
}

pub fn forward(x: &Tensor, rate: f64, rng: &mut Rng, mode: Mode) -> Result<(Tensor, DropoutCache)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Arg(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    match mode {
        Mode::Eval => Ok((
            x.clone(),
            DropoutCache {
                mask: None,
                mode,
            },
        )),
        Mode::Train => {
            let keep_scale = 1.0 / (1.0 - rate);
            let mut mask = Vec::with_capacity(x.len());
            for _ in 0..x.len() {
                if rng.next_f64() < rate {
                    mask.push(0.0);
                } else {
                    mask.push(keep_scale);
                }
            }
            let mask = Tensor::from_data(x.shape(), mask, x.precision())?;
            let y = x.mul(&mask)?;
            Ok((
                y,
                DropoutCache {
                    mask: Some(mask),
                    mode,
                },
            ))
        }
    }
}

pub fn backward(dy: &Tensor, cache: &DropoutCache) -> Result<Tensor> {
    if cache.mode != Mode::Train {
        return Err(Error::Contract(
            "dropout backward requires a train-mode cache".into(),
        ));
    }
    let mask = cache
        .mask
        .as_ref()
        .expect("train-mode dropout cache always has a mask");
    dy.mul(mask)
}

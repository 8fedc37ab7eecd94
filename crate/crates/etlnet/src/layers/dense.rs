//! Fully-connected layer `y = act(x W^T + b)`.

use crate::error::{Error, Result};
use crate::layers::activation::sigmoid;
use crate::numcore::{matmul, matmul_tn, Precision, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct DenseParams {
    /// `[out, in]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

impl DenseParams {
    /// Glorot-uniform weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng, precision: Precision) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Ok(DenseParams {
            weight: rng.uniform_tensor(&[out_dim, in_dim], -limit, limit, precision)?,
            bias: Tensor::zeros(&[out_dim], precision),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Tensor,
    pre_activation: Tensor,
    output: Tensor,
    act: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Forward pass over a `[batch, in]` input.
pub fn forward(x: &Tensor, p: &DenseParams, act: Activation) -> Result<(Tensor, DenseCache)> {
    let (_, c_in) = x.dim2()?;
    if c_in != p.in_dim() {
        return Err(Error::Dim(format!(
            "dense: input has {c_in} features but weight is {:?}",
            p.weight.shape()
        )));
    }
    let z = {
        let lin = crate::numcore::matmul_nt(x, &p.weight)?;
        add_bias_rows(&lin, &p.bias)?
    };
    let y = match act {
        Activation::None => z.clone(),
        Activation::Relu => z.map(|v| v.max(0.0))?,
        Activation::Sigmoid => z.map(sigmoid)?,
    };
    Ok((
        y.clone(),
        DenseCache {
            input: x.clone(),
            pre_activation: z,
            output: y,
            act,
        },
    ))
}

pub fn backward(dy: &Tensor, cache: &DenseCache, p: &DenseParams) -> Result<DenseGrads> {
    if dy.shape() != cache.output.shape() {
        return Err(Error::Contract(format!(
            "dense backward: upstream gradient shape {:?} does not match cached output {:?}",
            dy.shape(),
            cache.output.shape()
        )));
    }
    let dz = match cache.act {
        Activation::None => dy.clone(),
        Activation::Relu => {
            let mask = cache.pre_activation.map(|v| if v > 0.0 { 1.0 } else { 0.0 })?;
            dy.mul(&mask)?
        }
        Activation::Sigmoid => {
            let deriv = cache.output.map(|y| y * (1.0 - y))?;
            dy.mul(&deriv)?
        }
    };
    let weight = matmul_tn(&dz, &cache.input)?; // [out, in]
    let bias = column_sums(&dz)?;
    let input = matmul(&dz, &p.weight)?; // [batch, in]
    Ok(DenseGrads { input, weight, bias })
}

/// Adds a `[cols]` bias to every row of a `[rows, cols]` tensor.
pub(crate) fn add_bias_rows(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dim2()?;
    if bias.len() != cols {
        return Err(Error::Dim(format!(
            "bias length {} does not match {cols} columns",
            bias.len()
        )));
    }
    let mut out = x.data().to_vec();
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] += bias.data()[c];
        }
    }
    Tensor::from_data(x.shape(), out, x.precision())
}

/// Sums a `[rows, cols]` tensor over rows into `[cols]`.
pub(crate) fn column_sums(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dim2()?;
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x.data()[r * cols + c];
        }
    }
    Tensor::from_data(&[cols], out, x.precision())
}

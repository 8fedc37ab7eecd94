//! Dense row-major tensors.
//!
//! All values are carried as `f64`. A tensor tagged [`Precision::Standard`]
//! stores every element rounded to the nearest `f32` value after each
//! operation, so standard-mode results are exactly representable in 32 bits
//! and reproduce bit-for-bit when written to the 32-bit file formats.
//! [`Precision::Extended`] keeps full `f64` resolution and is required for
//! finite-difference gradient checks.
//!
//! Layout is row-major with channels last: a batch of sequences is
//! `[batch, time, channels]` and element `(b, t, c)` lives at
//! `(b * T + t) * C + c`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Values stored at `f32` resolution.
    Standard,
    /// Full `f64` resolution; mandatory for gradient checking.
    Extended,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Standard => write!(f, "standard"),
            Precision::Extended => write!(f, "extended"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Precision::Standard),
            "extended" => Ok(Precision::Extended),
            other => Err(Error::Arg(format!(
                "unknown precision {other:?}, expected \"standard\" or \"extended\""
            ))),
        }
    }
}

/// Dense N-dimensional array of real values.
///
/// Invariants: `product(shape) == data.len()` and every element is finite.
/// Both are enforced by every constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

#[inline]
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

impl Tensor {
    /// Builds a tensor, validating the shape/data length invariant and
    /// rejecting non-finite values. Standard precision rounds each element
    /// to the nearest `f32`.
    pub fn from_data(shape: &[usize], mut data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {expect} elements but {} were supplied",
                data.len()
            )));
        }
        if precision == Precision::Standard {
            for v in &mut data {
                *v = quantize(*v);
            }
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Arg(format!(
                "non-finite value {bad} in tensor of shape {shape:?}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            precision,
        })
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            precision,
        }
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Tensor {
        let n: usize = shape.iter().product();
        let v = match precision {
            Precision::Standard => quantize(value),
            Precision::Extended => value,
        };
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            precision,
        }
    }

    pub fn scalar(value: f64, precision: Precision) -> Tensor {
        Tensor::full(&[1], value, precision)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Re-tags the tensor with a different precision, re-rounding if the
    /// target is standard.
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        let mut data = self.data.clone();
        if precision == Precision::Standard {
            for v in &mut data {
                *v = quantize(*v);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
            precision,
        }
    }

    /// Interprets the tensor as `(rows, cols)`.
    pub fn dim2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dim(format!("expected a 2-d tensor, got {other:?}"))),
        }
    }

    /// Interprets the tensor as `(batch, time, channels)`.
    pub fn dim3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, t, c] => Ok((b, t, c)),
            other => Err(Error::Dim(format!("expected a 3-d tensor, got {other:?}"))),
        }
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({expect} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    fn binary_check(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        if self.precision != other.precision {
            return Err(Error::Arg(format!(
                "{op}: mixed precisions {} and {}",
                self.precision, other.precision
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_check(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_data(&self.shape, data, self.precision)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_check(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_data(&self.shape, data, self.precision)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_check(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_data(&self.shape, data, self.precision)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        Tensor::from_data(
            &self.shape,
            self.data.iter().map(|a| a + s).collect(),
            self.precision,
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        Tensor::from_data(
            &self.shape,
            self.data.iter().map(|a| a * s).collect(),
            self.precision,
        )
    }

    /// Element-wise map. The function must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::from_data(
            &self.shape,
            self.data.iter().map(|&a| f(a)).collect(),
            self.precision,
        )
    }
}

/// Standard matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dim2()?;
    let (kb, n) = b.dim2()?;
    if ka != kb {
        return Err(Error::Dim(format!(
            "matmul: inner extents differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.precision() != b.precision() {
        return Err(Error::Arg(format!(
            "matmul: mixed precisions {} and {}",
            a.precision(),
            b.precision()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &bd[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_data(&[m, n], out, a.precision())
}

/// `a [m, k]` times `b^T` where `b: [n, k]`; result `[m, n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dim2()?;
    let (n, kb) = b.dim2()?;
    if ka != kb {
        return Err(Error::Dim(format!(
            "matmul_nt: inner extents differ, {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &bd[j * kb..(j + 1) * kb];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_data(&[m, n], out, a.precision())
}

/// `a^T` times `b` where `a: [k, m]`, `b: [k, n]`; result `[m, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = a.dim2()?;
    let (kb, n) = b.dim2()?;
    if ka != kb {
        return Err(Error::Dim(format!(
            "matmul_tn: inner extents differ, {:?}^T x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    for k in 0..ka {
        let arow = &ad[k * m..(k + 1) * m];
        let brow = &bd[k * n..(k + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_data(&[m, n], out, a.precision())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_data(shape, data.to_vec(), Precision::Extended).unwrap()
    }

    #[test]
    fn shape_data_mismatch_is_rejected() {
        let err = Tensor::from_data(&[2, 3], vec![1.0; 5], Precision::Extended).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn non_finite_is_rejected() {
        let err = Tensor::from_data(&[2], vec![1.0, f64::NAN], Precision::Extended).unwrap_err();
        assert!(matches!(err, Error::Arg(_)));
    }

    #[test]
    fn standard_precision_rounds_to_f32() {
        let v = 0.1f64 + 1e-12;
        let x = Tensor::from_data(&[1], vec![v], Precision::Standard).unwrap();
        assert_eq!(x.data()[0], v as f32 as f64);
        let y = Tensor::from_data(&[1], vec![v], Precision::Extended).unwrap();
        assert_eq!(y.data()[0], v);
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[17.0, 39.0]);
    }

    // Brute-force oracle used by the matmul property checks below. Kept as a
    // plain triple loop, independent of the blocked implementation.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dim2().unwrap();
        let (_, n) = b.dim2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(7);
        let a = rng.uniform_tensor(&[7, 5], -1.0, 1.0, Precision::Extended).unwrap();
        let b = rng.uniform_tensor(&[5, 3], -1.0, 1.0, Precision::Extended).unwrap();
        let y = matmul(&a, &b).unwrap();
        let expect = matmul_oracle(&a, &b);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn matmul_oracle_on_random_shapes(
            m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in 0u64..1000,
            extended in proptest::bool::ANY,
        ) {
            let precision = if extended { Precision::Extended } else { Precision::Standard };
            let tol = if extended { 1e-12 } else { 1e-5 };
            let mut rng = Rng::new(seed);
            let a = rng.uniform_tensor(&[m, k], -1.0, 1.0, precision).unwrap();
            let b = rng.uniform_tensor(&[k, n], -1.0, 1.0, precision).unwrap();
            let y = matmul(&a, &b).unwrap();
            let expect = matmul_oracle(&a, &b);
            for (got, want) in y.data().iter().zip(&expect) {
                proptest::prop_assert!((got - want).abs() < tol);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn transposed_matmuls_agree_with_plain() {
        let mut rng = Rng::new(3);
        let a = rng.uniform_tensor(&[4, 6], -2.0, 2.0, Precision::Extended).unwrap();
        let b = rng.uniform_tensor(&[5, 6], -2.0, 2.0, Precision::Extended).unwrap();
        // a [4,6] x b^T [6,5]
        let nt = matmul_nt(&a, &b).unwrap();
        let mut bt = vec![0.0; 30];
        for i in 0..5 {
            for j in 0..6 {
                bt[j * 5 + i] = b.data()[i * 6 + j];
            }
        }
        let bt = t(&[6, 5], &bt);
        let plain = matmul(&a, &bt).unwrap();
        for (x, y) in nt.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-14);
        }

        let c = rng.uniform_tensor(&[6, 4], -2.0, 2.0, Precision::Extended).unwrap();
        let d = rng.uniform_tensor(&[6, 3], -2.0, 2.0, Precision::Extended).unwrap();
        let tn = matmul_tn(&c, &d).unwrap();
        let mut ct = vec![0.0; 24];
        for i in 0..6 {
            for j in 0..4 {
                ct[j * 6 + i] = c.data()[i * 4 + j];
            }
        }
        let ct = t(&[4, 6], &ct);
        let plain = matmul(&ct, &d).unwrap();
        for (x, y) in tn.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn ewise_identities() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let z = Tensor::zeros(&[3], Precision::Extended);
        assert_eq!(x.add(&z).unwrap(), x);
        assert_eq!(x.sub(&x).unwrap(), z);
        assert_eq!(x.mul_scalar(2.0).unwrap().data(), &[2.0, 4.0, 6.0]);
        let s = t(&[1], &[0.0]).map(|v| 1.0 / (1.0 + (-v).exp())).unwrap();
        assert_eq!(s.data(), &[0.5]);
    }

    #[test]
    fn ewise_shape_mismatch() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let y = t(&[2], &[1.0, 2.0]);
        assert!(matches!(x.add(&y).unwrap_err(), Error::Dim(_)));
    }
}

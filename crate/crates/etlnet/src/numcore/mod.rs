//! Dense-tensor arithmetic and seeded pseudorandomness.
//!
//! Everything numerical in the crate is built on these two types: [`Tensor`]
//! (immutable once returned from an operation, safe to share read-only) and
//! [`Rng`] (single-owner, children derived by seed-splitting).

mod rng;
mod tensor;

pub use rng::Rng;
pub use tensor::{matmul, matmul_nt, matmul_tn, Precision, Tensor};

//! Forward and backward passes for every layer in the network: dilated
//! causal 1-d convolution, batch normalization, dropout, LSTM / BiLSTM and
//! dense layers with their activations.
//!
//! Each layer follows the same pattern: `forward` returns the output plus an
//! opaque cache of the intermediates the backward pass needs, and `backward`
//! consumes upstream gradients together with that cache. A cache is valid
//! for exactly one `(input, mode)` forward invocation; passing an eval-mode
//! cache to a backward pass is a contract violation.
//!
//! All operations are pure given `(input, params, cache, rng)`; parameters
//! are only ever mutated by the optimizer. Inference over disjoint batches
//! with shared read-only parameters is safe.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod lstm;

/// Whether a forward pass is part of training (dropout active, batch
/// statistics used and running statistics updated) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub use batchnorm::BatchNormState;
pub use conv::ConvParams;
pub use dense::{Activation, DenseParams};
pub use lstm::LstmParams;

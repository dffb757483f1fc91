//! Retrieval-augmented attention engine: a toy volumetric ViT encoder whose
//! blocks can be augmented with kNN lookups into an on-disk external memory
//! of precomputed (key, value) tensors, fused with local self-attention by
//! distance-derived ratios. Includes the bank-building pipeline and an
//! efficiency/ablation benchmark harness.

pub mod attention;
pub mod bank;
pub mod bench;
pub mod builder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod prng;
pub mod tensor;
pub mod volume;

#[cfg(test)]
pub(crate) mod test_oracles;

pub use error::{Error, Result};
pub use tensor::Tensor;

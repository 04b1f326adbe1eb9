//! Region-affinity attention for whole-image classification.
//!
//! The crate covers the attention layer (forward and exact backward), a small
//! convolutional backbone and classifier head, the cross-entropy plus
//! pairwise-margin contrastive objective, finite-difference and brute-force
//! verification oracles, a synthetic two-class dataset, the k-fold training
//! harness, and the local-versus-global complexity benchmark.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod par;
pub mod pgm;
pub mod raa;
pub mod tensor;
pub mod model;
pub mod trainer;

pub use error::{RaaError, Result};
pub use tensor::{NamedTensorSet, Tensor};

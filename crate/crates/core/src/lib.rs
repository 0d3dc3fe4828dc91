//! texmatch-core: texture-aware pairwise verification at desk scale.
//!
//! The crate is self-contained: a dense-tensor engine with reverse-mode
//! differentiation, the convolutional layer vocabulary, texture and
//! reconstruction losses, the two-stage model (autoencoder pretraining,
//! weight-shared pairwise matcher), a seeded synthetic texture dataset,
//! Adam training loops with portable checkpoints, and the open-set
//! all-vs-all evaluation stack (FAR/FRR, EER, DET, AUC).

pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{no_grad, Tensor};

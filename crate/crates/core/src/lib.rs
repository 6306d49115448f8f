//! Deterministic dense-tensor library with reverse-mode automatic
//! differentiation, sized for training small transformers on CPU.
//!
//! The design is a per-step tape: a forward pass records every op on a
//! [`tape::Tape`], `backward` walks the nodes in exact reverse insertion
//! order, and the tape is dropped afterwards. Model parameters live outside
//! the tape as [`tensor::PTensor`] values and are staged onto it as leaves
//! each step.
//!
//! Also home to the bits every other crate shares: the counter-based
//! [`rng::Rng`] with named substreams, and the on-disk checkpoint format
//! in [`ckpt`].

pub mod ckpt;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

mod ops;

pub use error::CoreError;
pub use ops::set_parallel;
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tape::{GradStore, NodeId, Tape};
pub use tensor::PTensor;

pub type Result<T> = std::result::Result<T, CoreError>;

//! Tape operations. Each op computes its value eagerly and, when gradients
//! are enabled and some input needs them, records a backward closure that
//! accumulates into its parents' buffers.

mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use linalg::set_parallel;

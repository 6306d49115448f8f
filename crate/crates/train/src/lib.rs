//! Corpora, the three-phase training pipeline, and evaluation tooling.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod optim;
pub mod run;
pub mod sampler;
pub mod schedule;
pub mod trace;
pub mod trainer;

pub use error::TrainError;

pub type Result<T> = std::result::Result<T, TrainError>;

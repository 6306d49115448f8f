//! Model zoo: the decoder-only transformer, stitched hub-and-spoke models,
//! and the expert-merging / expert-upcycling baselines.

pub mod ckpt_io;
pub mod config;
pub mod error;
pub mod lm;
pub mod merge;
pub mod moe;
pub mod stitch;
pub mod transformer;

pub use config::ModelConfig;
pub use error::ModelError;
pub use stitch::{StitchInit, StitchKind, StitchLayer, StitchPattern, StitchedModel};
pub use transformer::TransformerModel;

pub type Result<T> = std::result::Result<T, ModelError>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer range {from}..{to} invalid for {n_layers}-layer model")]
    LayerRange {
        from: usize,
        to: usize,
        n_layers: usize,
    },

    #[error("sequence of length {len} too short for next-token loss")]
    SequenceTooShort { len: usize },

    #[error("context of {len} tokens exceeds max_seq_len {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("expected {expected} expert states, got {got}")]
    ExpertCountMismatch { expected: usize, got: usize },

    #[error("incompatible configs: {0}")]
    IncompatibleConfigs(String),

    #[error("bad stitch count K={k} for {n_layers} layers")]
    BadK { k: usize, n_layers: usize },

    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown model spec: {0}")]
    UnknownModelSpec(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Core(#[from] stitchkit_core::CoreError),
}

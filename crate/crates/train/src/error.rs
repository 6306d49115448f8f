use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad generator params: {0}")]
    BadParams(String),

    #[error("bad cipher key: {0}")]
    BadKey(String),

    #[error("mixture has no corpora with positive weight")]
    EmptyMixture,

    #[error("step {step} outside schedule 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("no trainable parameters after applying freeze groups")]
    AllFrozen,

    #[error("non-finite loss at step {step} (first bad op: {op})")]
    NaNLoss { step: usize, op: String },

    #[error("cannot branch into {0} experts")]
    BadN(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown model spec: {0}")]
    UnknownModelSpec(String),

    #[error(transparent)]
    Model(#[from] stitchkit_model::ModelError),

    #[error(transparent)]
    Core(#[from] stitchkit_core::CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

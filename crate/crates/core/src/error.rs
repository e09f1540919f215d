use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("backward called without a matching forward pass")]
    BackwardWithoutForward,

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("insufficient expert pool: required {required} trajectories, available {available}")]
    InsufficientExperts { required: usize, available: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset has no actions; diffusion training needs state-action segments")]
    MissingActions,

    #[error("observation normalizer mismatch: model expects {expected}, data has {got}")]
    NormalizerMismatch { expected: String, got: String },

    #[error("model checkpoint mismatch: {expected} vs {got}")]
    ModelMismatch { expected: String, got: String },

    #[error("degenerate embedding with norm {norm:e} at origin {origin:?}")]
    DegenerateEmbedding {
        norm: f64,
        origin: Option<(usize, usize)>,
    },

    #[error("neighbor count m={m} exceeds the {available} available expert embeddings")]
    NeighborCount { m: usize, available: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("dataset carries no rewards")]
    MissingRewards,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source} (artifacts: {artifacts:?})")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
        artifacts: Vec<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors caused by user input rather than a failing computation.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

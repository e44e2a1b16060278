use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector")]
    ZeroNormVector,
    #[error("non-finite function value at finite-difference probe {probe}")]
    NonFiniteEvaluation { probe: usize },
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid protocol spec: {0}")]
    InvalidSpec(String),
    #[error("empty feature set")]
    EmptyFeatureSet,
    #[error("row {row} coincides with the centroid")]
    DegenerateRow { row: usize },
    #[error("replay size {n_r} exceeds domain size {n}")]
    ReplayTooLarge { n_r: usize, n: usize },
    #[error("replay size {0} must be even")]
    OddReplaySize(usize),
    #[error("refill inputs belong to different domains")]
    DomainMismatch,
    #[error("no head registered for task {0}")]
    MissingHead(u32),
    #[error("mixed direction is numerically zero (antipodal normals)")]
    AntipodalDegenerate,
    #[error("head bank is empty")]
    EmptyBank,
    #[error("expected task {expected}, got {got}")]
    NonSequentialTask { expected: u32, got: u32 },
    #[error("AUC needs both classes")]
    SingleClass,
    #[error("first-seen AUC is zero")]
    ZeroFirstAuc,
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint version {found} does not match supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

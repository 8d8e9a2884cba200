use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpaError>;

#[derive(Debug, Error)]
pub enum SpaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },

    #[error("ragged row at line {line}: expected {expected} values, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid number at line {line}: {token:?}")]
    InvalidNumber { line: usize, token: String },

    #[error("duplicate primitive {name:?} at line {line}")]
    DuplicatePrimitive { name: String, line: usize },

    #[error("empty primitive name")]
    EmptyName,

    #[error("unknown primitive {0:?}")]
    UnknownPrimitive(String),

    #[error("pair ({0}, {1}) appears in both seen and held-out pairs")]
    OverlappingPairs(String, String),

    #[error("duplicate pair ({0}, {1})")]
    DuplicatePair(String, String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("zero-norm row for primitive {0:?}")]
    ZeroNorm(String),

    #[error("k = {k} out of range: must satisfy 1 <= k <= {max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),

    #[error("SCL requires frozen neighborhoods")]
    UnfrozenNeighborhood,

    #[error("sample label ({0}, {1}) is not a seen composition")]
    UnseenLabelInBatch(String, String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("frozen parameters changed during training: {0}")]
    FrozenMutated(String),

    #[error("missing calibrated row for {0:?}")]
    MissingCalibratedRow(String),

    #[error("empty bias grid")]
    EmptyGrid,

    #[error("correlation undefined: zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("degenerate quantiles: {0}")]
    DegenerateQuantiles(String),

    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("unknown strategy {kind} {name:?}; registered: {available}")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl SpaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        SpaError::Json {
            context: context.into(),
            source,
        }
    }
}

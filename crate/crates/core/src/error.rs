use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate mask: row {row} has no unmasked position")]
    DegenerateMask { row: usize },

    #[error("KL support violation: row {row}, column {col} has p > 0 but q == 0")]
    SupportViolation { row: usize, col: usize },

    #[error("row {row} is not a distribution (sums to {sum})")]
    NotNormalized { row: usize, sum: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward error: {0}")]
    Backward(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty sequence at index {0}")]
    EmptySequence(usize),

    #[error("head counts differ: teacher has {teacher}, student has {student}")]
    HeadMismatch { teacher: usize, student: usize },

    #[error("sequence lengths differ: teacher {teacher}, student {student}")]
    LengthMismatch { teacher: usize, student: usize },

    #[error("layer counts not divisible: teacher has {teacher} layers, student has {student}")]
    LayersNotDivisible { teacher: usize, student: usize },

    #[error("value dimensions differ ({student} vs {teacher}) and no projection was supplied")]
    MissingProjection { teacher: usize, student: usize },

    #[error("soft-label loss needs at least one masked position")]
    EmptyMaskedSet,

    #[error("missing capture: {0}")]
    MissingCapture(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

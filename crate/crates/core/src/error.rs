use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("empty after clip")]
    EmptyAfterClip,
    #[error("decoded box overflows the numeric range (offsets {0:?})")]
    DecodeOverflow([f64; 4]),

    #[error("background has no group")]
    BackgroundHasNoGroup,
    #[error("empty group")]
    EmptyGroup,
    #[error("alignment error: {states} states but {features} feature vectors")]
    Alignment { states: usize, features: usize },

    #[error("invalid label {label} for {classes} classes (including background)")]
    InvalidLabel { label: usize, classes: usize },
    #[error("no iterations")]
    NoIterations,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("divergence: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("scene too crowded: could not place object {object} in scene {scene}")]
    SceneTooCrowded { scene: u64, object: usize },

    #[error("undefined AP for class {0}: no ground truth")]
    UndefinedAp(usize),
    #[error("no evaluable classes")]
    NoEvaluableClasses,

    #[error("xml parse error at {line}:{column}: {message}")]
    Xml { line: u32, column: u32, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("line {line}: invalid score {score}")]
    InvalidScore { line: usize, score: f64 },
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error stems from bad user input (files, config, arguments)
    /// rather than a failure during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Divergence { .. } | Error::DecodeOverflow(_) | Error::Io(_))
    }
}

//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is at or below 1e-12")]
    NearZeroNorm(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("finite-difference step {0:e} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
    #[error("duplicate token `{0}`")]
    DuplicateToken(String),
    #[error("task spec lists no tokens")]
    EmptySpec,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("init phrase has {got} tokens but the bank has {expected}")]
    PhraseLengthMismatch { expected: usize, got: usize },
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("unknown attribute {attribute} for class {class}")]
    UnknownAttribute { class: String, attribute: String },
    #[error("unknown negative attribute {0}")]
    UnknownNegative(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("duplicate attribute `{attribute}` in class `{class}`")]
    DuplicateAttribute { class: String, attribute: String },
    #[error("class `{0}` has no attributes")]
    EmptyClass(String),
    #[error("cannot cluster zero points")]
    TooFewPoints,
    #[error("class `{0}` has no images")]
    NoImages(String),
    #[error("class `{0}` has an empty attribute set")]
    EmptyAttributeSet(String),
    #[error("textual prompt set is empty")]
    EmptyTextualSet,
    #[error("loss weight `{name}` is negative: {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("task has no training classes")]
    EmptyTask,
    #[error("training loss diverged at epoch {0}")]
    DivergedLoss(usize),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("negative input: {0}")]
    NegativeInput(f64),
    #[error("file version {found} not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: String },
    #[error("vocabulary hash mismatch: checkpoint {expected}, supplied {found}")]
    VocabularyHashMismatch { expected: String, found: String },
    #[error("unknown sweep parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("unknown OOD variant `{0}`")]
    UnknownKind(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case code used in machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NearZeroNorm(_) => "near_zero_norm",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonPositiveTemperature(_) => "non_positive_temperature",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NotADistribution(_) => "not_a_distribution",
            Error::NonFiniteLoss => "non_finite_loss",
            Error::InvalidStep(_) => "invalid_step",
            Error::DuplicateToken(_) => "duplicate_token",
            Error::EmptySpec => "empty_spec",
            Error::UnknownToken(_) => "unknown_token",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::EmptySequence => "empty_sequence",
            Error::PhraseLengthMismatch { .. } => "phrase_length_mismatch",
            Error::UnknownClass(_) => "unknown_class",
            Error::UnknownAttribute { .. } => "unknown_attribute",
            Error::UnknownNegative(_) => "unknown_negative",
            Error::SchemaViolation(_) => "schema_violation",
            Error::DuplicateAttribute { .. } => "duplicate_attribute",
            Error::EmptyClass(_) => "empty_class",
            Error::TooFewPoints => "too_few_points",
            Error::NoImages(_) => "no_images",
            Error::EmptyAttributeSet(_) => "empty_attribute_set",
            Error::EmptyTextualSet => "empty_textual_set",
            Error::NegativeWeight { .. } => "negative_weight",
            Error::NonFiniteGradient => "non_finite_gradient",
            Error::EmptyTask => "empty_task",
            Error::DivergedLoss(_) => "diverged_loss",
            Error::UnknownSplit(_) => "unknown_split",
            Error::NegativeInput(_) => "negative_input",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::VocabularyHashMismatch { .. } => "vocabulary_hash_mismatch",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::UnknownKind(_) => "unknown_kind",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

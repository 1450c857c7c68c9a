//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate vector in {op}: norm {norm:e} below 1e-12")]
    DegenerateVector { op: &'static str, norm: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("model has no classes; expand the head before computing logits")]
    NoClasses,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("class {0} already present in the replay buffer")]
    ClassAlreadyBuffered(usize),

    #[error("no buffer exemplars for class {0}")]
    MissingExemplars(usize),

    #[error("prototype spec infeasible: {0}")]
    InfeasibleSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error("checkpoint format version {found} not supported (max {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("normalized forgetting undefined: base accuracy is zero")]
    UndefinedForgetting,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

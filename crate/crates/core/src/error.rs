use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("column {column} has no valid entries and cannot be interpolated")]
    UnrecoverableColumn { column: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prefix initialization error: {0}")]
    PrefixInit(String),

    #[error("distillation error: {0}")]
    Distill(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that an operation cannot combine.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A scalar argument outside the operation's domain (e.g. a non-positive temperature).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Non-finite values encountered while evaluating or probing a computation.
    #[error("non-finite value in {name}: {detail}")]
    Numeric { name: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step} (last good step: {last_good_step:?}, loss {loss})")]
    Diverged {
        step: usize,
        last_good_step: Option<usize>,
        loss: f64,
    },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration or argument.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data (labels out of range, empty inputs, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A tensor picked up NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A checkpoint could not be applied to a model.
    #[error("load error: {0}")]
    Load(String),

    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Diverged { epoch: usize, step: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the caller's configuration rather than by a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("model-id mismatch: expected {expected:#010x}, found {found:#010x}")]
    ModelMismatch { expected: u32, found: u32 },
    #[error("prompt-set mismatch: stream needs lambda id {expected}, got {found}")]
    PromptMismatch { expected: u8, found: u8 },
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake-case tag for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::ModelMismatch { .. } => "model_mismatch",
            Error::PromptMismatch { .. } => "prompt_mismatch",
            Error::CorruptStream(_) => "corrupt_stream",
            Error::Format(_) => "format",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::Io(_) => "io",
        }
    }
}

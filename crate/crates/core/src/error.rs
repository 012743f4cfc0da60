use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing calibration data")]
    MissingCalibration,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate codeword at row {row} (norm {norm:e})")]
    DegenerateCodeword { row: usize, norm: f64 },
    #[error("shape mismatch in {field}: expected {expected}, found {found}")]
    ShapeMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("no active devices")]
    NoActiveDevices,
    #[error("decoder diverged at layer {layer} (residual norm {residual:e})")]
    Diverged { layer: usize, residual: f64 },
    #[error("non-finite intermediate in decoder layer {layer}: {what}")]
    DecoderNonFinite { layer: usize, what: &'static str },
    #[error("local divergence on device {device}")]
    LocalDivergence { device: usize },
    #[error("unsupported weight file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(field: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            field: field.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

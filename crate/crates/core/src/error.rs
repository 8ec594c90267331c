use thiserror::Error;

pub type Result<T> = std::result::Result<T, LauError>;

#[derive(Debug, Error)]
pub enum LauError {
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    Index {
        index: [usize; 4],
        shape: [usize; 4],
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("cannot reduce a loss map with no valid pixels")]
    EmptyReduction,
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LauError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LauError::Shape(msg.into())
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        LauError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image `{image_id}`, field `{field}`: {message}")]
    Schema {
        image_id: String,
        field: String,
        message: String,
    },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token `{0}` not found in embedding table")]
    UnknownToken(String),

    #[error("unknown class label `{0}`")]
    UnknownClass(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("scene placement infeasible after {0} attempts")]
    Placement(usize),

    #[error("image codec: {0}")]
    Image(String),

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(image_id: &str, field: &str, message: impl Into<String>) -> Self {
        Error::Schema {
            image_id: image_id.to_string(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            other => Error::Phase {
                phase,
                source: Box::new(other),
            },
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

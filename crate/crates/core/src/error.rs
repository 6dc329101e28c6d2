use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("identification error: {0}")]
    Identification(String),

    #[error("sample size error: {0}")]
    Size(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("mode search failed to initialize: {0}")]
    Initialization(String),

    #[error("ill-conditioned: {0}")]
    Conditioning(String),

    #[error("evidence estimation failed: {0}")]
    Evidence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{model}: {source}")]
    Model {
        model: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the label of the model it came from.
    pub fn in_model(self, model: impl Into<String>) -> Error {
        Error::Model {
            model: model.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by user configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            Error::Model { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

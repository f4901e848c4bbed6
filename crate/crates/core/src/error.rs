use thiserror::Error;

/// Errors raised by the numeric core, the models and the training loops.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index {index} out of range for bound {bound} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("capacity exceeded: need {needed} positions, have {available}")]
    Capacity { needed: usize, available: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("steering iteration {iteration}: {source}")]
    Steer {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss in trajectory {trajectory}")]
    NonFiniteLoss { trajectory: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::Capacity { .. } => "capacity",
            Error::Domain(_) => "domain",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Steer { source, .. } | Error::Episode { source, .. } => source.kind(),
            Error::NonFiniteLoss { .. } => "numeric",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

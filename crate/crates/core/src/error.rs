use std::path::PathBuf;

/// Errors raised by the library. Messages are prefixed with the module that
/// produced them so the CLI can surface them unchanged.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("posterior: {0}")]
    Model(String),

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("diagnostics: {0}")]
    Diagnostics(String),

    #[error("predict: {0}")]
    Predict(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Arguments outside an operation's domain (bad dimensions, non-finite
    /// input, invalid labels, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Gradient descent would diverge: `gamma * lambda_max >= 2`.
    #[error("learning rate {gamma} is unstable; it must be below gamma_max = {gamma_max}")]
    Unstable { gamma: f64, gamma_max: f64 },

    /// A file could not be parsed.
    #[error("{}:{line}: {message}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// A single Monte Carlo realization failed.
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, looking through per-seed wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Seed { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

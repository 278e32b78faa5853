use thiserror::Error;

/// Errors raised anywhere in the multicontinuum pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent mesh, config or scheme parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data outside the admissible domain (non-positive coefficient, bad inclusion, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A continuum or constraint set carries no information on some coarse block.
    #[error("degenerate continuum: {0}")]
    Degenerate(String),

    /// A matrix that has to be factorized is singular or indefinite.
    #[error("singular system: {0}")]
    Singular(String),

    /// A computed quantity violates a structural invariant (asymmetry, γ ≥ 1, ...).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("not implemented: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

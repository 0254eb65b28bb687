use nalgebra::DMatrix;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The latent projection fed into an observation link was not finite.
    #[error("invalid latent projection: {0}")]
    InvalidProjection(f64),

    /// A covariance could not be factorized even after jitter escalation.
    #[error("factorization failed for covariance of size {}x{}", cov.nrows(), cov.ncols())]
    Factorization { cov: DMatrix<f64> },

    #[error("non-finite output of propagated map at sigma point {index}")]
    Propagation { index: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("variance of observed values is zero")]
    UndefinedVariance,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("at time index {t}: {source}")]
    AtTime {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("initialization error: {0}")]
    Initialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier, used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InvalidProjection(_) => "invalid_projection",
            Error::Factorization { .. } => "factorization",
            Error::Propagation { .. } => "propagation",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::UndefinedVariance => "undefined_variance",
            Error::DegenerateSample(_) => "degenerate_sample",
            Error::AtTime { source, .. } => source.kind(),
            Error::Initialization(_) => "initialization",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn at(self, t: usize) -> Error {
        match self {
            e @ Error::AtTime { .. } => e,
            e => Error::AtTime { t, source: Box::new(e) },
        }
    }
}

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or dimensionally inconsistent inputs.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A response or parameter value outside the domain of the requested density.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite intermediate turned up while scanning the data.
    #[error("numeric error at row {row}: {msg}")]
    Numeric { row: usize, msg: String },

    /// An observed-category probability collapsed to zero.
    #[error("degenerate category {0}: zero marginal probability")]
    DegenerateCategory(usize),

    /// Adaptive quadrature ran out of subdivisions before reaching tolerance.
    /// Carries the best available estimate and its error bound.
    #[error("quadrature did not converge: estimate {estimate}, error bound {err_est}")]
    QuadratureBudget { estimate: f64, err_est: f64 },

    /// Quadrature failure while filling a Fisher information entry.
    #[error("fisher entry ({row},{col}) failed: {source}")]
    FisherEntry {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    /// Parameter on the boundary of its space (probability in {0,1}, zero scale).
    #[error("parameter on boundary: {0}")]
    Boundary(String),

    /// Every EM restart stopped before the tolerance was met.
    #[error("EM failed to converge in any of {restarts} restarts (best log-likelihood {best_loglik})")]
    EmNonConvergence { restarts: usize, best_loglik: f64 },

    /// An observed-category stratum holds no rows, so its gating row cannot be estimated.
    #[error("observed category {0} has no rows")]
    EmptyStratum(usize),

    /// I/O while reading or writing an external table.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV parse or encode failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("symmetric eigensolver did not converge on a {dim}x{dim} matrix (frobenius norm {norm:e}, diagonal range [{diag_min:e}, {diag_max:e}])")]
    EigenNonConvergence {
        dim: usize,
        norm: f64,
        diag_min: f64,
        diag_max: f64,
    },

    #[error(
        "schur decomposition did not converge on a {dim}x{dim} matrix (frobenius norm {norm:e})"
    )]
    SchurNonConvergence { dim: usize, norm: f64 },

    #[error("singular Lyapunov equation: eigenvalue sum {sum:e} near zero (blocks {i}, {j})")]
    SingularLyapunov { sum: f64, i: usize, j: usize },

    #[error(
        "Riccati solver did not converge after {iterations} iterations (residual {residual:e})"
    )]
    CareNotConverged { iterations: usize, residual: f64 },

    #[error("Riccati solver failed at Newton iteration {iteration}: {source}")]
    CareIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("analysis failed at coarse site {site}: {source}")]
    Site {
        site: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite state value at index {index}")]
    NonFinite { index: usize },

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

use alloc::string::String;

/// Failures raised by the solvers and estimators.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("policy is not mean-square stabilizing (operator condition estimate {condition:e})")]
    Unstabilized { condition: f64 },

    #[error("policy pair is not mean-square stabilizing (spectral abscissa {abscissa:e})")]
    NotStabilizing { abscissa: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("regression matrix is rank deficient: rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("{which} loop did not converge within {cap} iterations")]
    IterationCap { which: &'static str, cap: usize },

    #[error("outer iteration {outer}, inner iteration {inner}: {source}")]
    AtIteration {
        outer: usize,
        inner: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("state blow-up on path {path} at t = {time:.4} (|x| = {norm:e})")]
    Destabilized { path: usize, time: f64, norm: f64 },
}

impl Error {
    pub(crate) fn at(self, outer: usize, inner: usize) -> Self {
        Error::AtIteration {
            outer,
            inner,
            source: alloc::boxed::Box::new(self),
        }
    }

    /// Strips iteration context and returns the underlying failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

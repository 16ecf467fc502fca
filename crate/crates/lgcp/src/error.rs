//! Shared error type for the library.

use thiserror::Error;

/// Errors raised by geometry, simulation, likelihood and inference code.
#[derive(Debug, Error)]
pub enum Error {
    /// A location falls inside the window but in no areal unit.
    #[error("location ({x}, {y}) is contained in no areal unit")]
    NoContainingUnit { x: f64, y: f64 },

    /// All pairwise distances are zero, so no length scale can be fixed.
    #[error("degenerate geometry: all pairwise distances are zero")]
    DegenerateGeometry,

    /// Covariance factorization failed even after the jitter ladder.
    #[error("covariance matrix is numerically singular (jitter up to {max_jitter:e} tried)")]
    SingularCovariance { max_jitter: f64 },

    /// Integration-point budget smaller than the number of units.
    #[error("integration budget {budget} is smaller than the unit count {units}")]
    InsufficientBudget { budget: usize, units: usize },

    /// The intensity evaluated to NaN or infinity.
    #[error("non-finite intensity at ({x}, {y})")]
    NonFiniteIntensity { x: f64, y: f64 },

    /// Expected event count of a homogeneous Poisson draw is too large to realize.
    #[error("expected event count {expected:.3e} exceeds the simulation cap")]
    IntensityOverflow { expected: f64 },

    /// A continuous nonspatial covariate has no usable bound.
    #[error("nonspatial covariate {index} has no bound compatible with its distribution")]
    UnboundedCovariate { index: usize },

    /// A mark outside the set accepted by the model.
    #[error("event {index} carries mark {mark:?}, expected one of {expected}")]
    InvalidMark {
        index: usize,
        mark: Option<f64>,
        expected: &'static str,
    },

    /// The MCMC starting state has zero posterior density.
    #[error("initial state has log posterior {value}; cannot start the chain")]
    InvalidInitialState { value: f64 },

    /// Pointwise log-likelihood matrix contains NaN or infinity.
    #[error("non-finite pointwise log-likelihood at sample {sample}, event {event}")]
    NonFiniteLogLik { sample: usize, event: usize },

    /// Model-comparison inputs were fit to different data.
    #[error("models are incomparable: {reason}")]
    IncomparableModels { reason: String },

    /// Malformed input file content.
    #[error("parse error at {path}:{row}: {reason}")]
    ParseError {
        path: String,
        row: usize,
        reason: String,
    },

    /// Input value outside the domain of a requested transform.
    #[error("domain error at {path}:{row}: {reason}")]
    DomainError {
        path: String,
        row: usize,
        reason: String,
    },

    /// Construction-time validation failure or argument mismatch.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Shorthand for an [`Error::InvalidInput`].
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wraps an IO error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

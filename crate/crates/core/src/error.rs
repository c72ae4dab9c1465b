use std::fmt;

use thiserror::Error;

/// Pipeline stage an error originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validation,
    CrossValidation,
    InitialFit,
    ProfileFit,
    OneStep,
    Variance,
    Nuisance,
    Simulation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Validation => "validation",
            Stage::CrossValidation => "cross-validation",
            Stage::InitialFit => "initial fit",
            Stage::ProfileFit => "profile fit",
            Stage::OneStep => "one-step update",
            Stage::Variance => "variance",
            Stage::Nuisance => "nuisance fit",
            Stage::Simulation => "simulation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage}: solver did not converge after {iterations} sweeps (theta = {theta:?})")]
    NonConvergence {
        stage: Stage,
        theta: Vec<f64>,
        iterations: usize,
    },

    #[error("{stage}: curvature matrix is singular or ill-conditioned (condition estimate {condition:e})")]
    Singular { stage: Stage, condition: f64 },

    #[error("cross-validation: degenerate folds remain after reshuffling ({0})")]
    DegenerateFolds(String),

    #[error("{stage}: {message}")]
    Numerical { stage: Stage, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wraps the error with a context label such as the cross-fit half or coordinate.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is bad input rather than a numerical failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::Io(_) | Error::Csv(_) | Error::Serde(_) => true,
            Error::Context { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

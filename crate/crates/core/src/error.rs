use thiserror::Error;

use crate::lattice::Site;

#[derive(Debug, Error)]
pub enum Error {
    /// An environment specification that cannot emit uniformly elliptic laws.
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A lattice computation would need more sites than the configured budget.
    #[error("resource budget exceeded: {what} needs {required} sites (budget {budget})")]
    Resource {
        what: String,
        required: u128,
        budget: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("time index mismatch: {left} vs {right}")]
    TimeMismatch { left: usize, right: usize },

    /// Sites of a distribution that fall outside an exactly computed field.
    #[error("{} support sites not covered by the prefactor window (first: {:?})", .uncovered.len(), .uncovered.first())]
    Coverage { uncovered: Vec<Site> },

    #[error("singular covariance matrix")]
    SingularCovariance,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The noise budget is zero because the clipped gradient carries no energy.
    #[error("degenerate budget: clipped gradient has zero energy")]
    DegenerateBudget,

    /// Every gradient component is zero, so no location can be inferred.
    #[error("gradient carries no location information (all components zero)")]
    NoInformation,

    #[error("training diverged at round {round}: loss {loss:.6e} exceeds {limit:.6e}")]
    Diverged { round: usize, loss: f64, limit: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

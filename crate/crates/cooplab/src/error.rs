use thiserror::Error;

/// Crate-level error, wrapping the per-subsystem errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Bev(#[from] crate::bev::BevError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] crate::sim::dataset::DataError),
}

impl Error {
    /// True when the failure is a numerical abort (non-finite values in
    /// training or inference) rather than a validation problem.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Nn(crate::nn::NnError::NonFinite { .. }))
    }
}

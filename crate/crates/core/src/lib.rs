//! Hierarchical exposure modelling and pooled exposure-response curve
//! estimation across heterogeneous studies.

pub mod exposure_fit;
pub mod model;
pub mod outcome_fit;
pub mod sampler;
pub mod simulation;
pub mod spline;
pub mod summary;

use thiserror::Error;

pub use model::ModelError;
pub use sampler::SamplerError;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Spline(#[from] spline::SplineError),
    #[error("{0}")]
    Input(String),
}

//! Unconstrained-space log posteriors for the exposure and outcome models.

pub mod exposure;
pub mod lkj;
pub mod outcome;
pub mod transform;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::spline::SplineError;
use transform::TransformError;

pub use exposure::{ExposureDataset, ExposureDatasetBuilder, ExposureModel, ExposureParams, ExposurePriors};
pub use outcome::{
    Beta0Mode, BetaConstraint, ErcMode, OutcomeDataset, OutcomeDatasetBuilder, OutcomeModel, OutcomeParams,
    OutcomePriors,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Prior on a standard deviation: half-normal `N+(mean, var)` or held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalePrior {
    HalfNormal { mean: f64, var: f64 },
    Fixed { value: f64 },
}

impl ScalePrior {
    pub fn half_normal(mean: f64, var: f64) -> Self {
        ScalePrior::HalfNormal { mean, var }
    }

    pub fn fixed(value: f64) -> Self {
        ScalePrior::Fixed { value }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, ScalePrior::HalfNormal { .. })
    }

    pub fn validate(&self, name: &str) -> Result<(), String> {
        match *self {
            ScalePrior::HalfNormal { mean, var } if var > 0.0 && mean.is_finite() => Ok(()),
            ScalePrior::Fixed { value } if value > 0.0 && value.is_finite() => Ok(()),
            _ => Err(format!("{name}: invalid scale prior {self:?}")),
        }
    }

    /// Log density of `sigma` and its derivative with respect to `sigma`.
    /// Fixed scales contribute nothing.
    pub(crate) fn log_density(&self, sigma: f64) -> (f64, f64) {
        match *self {
            ScalePrior::HalfNormal { mean, var } => {
                let sd = var.sqrt();
                let norm = Normal::new(0.0, 1.0).unwrap().cdf(mean / sd).ln();
                let d = sigma - mean;
                (-0.5 * d * d / var - HALF_LN_2PI - 0.5 * var.ln() - norm, -d / var)
            }
            ScalePrior::Fixed { .. } => (0.0, 0.0),
        }
    }
}

/// Normal log density and its derivative with respect to `x`.
#[inline]
pub(crate) fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}

/// Named contiguous slices of a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    blocks: Vec<(String, usize, usize)>,
    len: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: &str, len: usize) -> std::ops::Range<usize> {
        let start = self.len;
        self.blocks.push((name.to_string(), start, len));
        self.len += len;
        start..start + len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.blocks.iter().find(|b| b.0 == name).map(|b| b.1..b.1 + b.2)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, std::ops::Range<usize>)> {
        self.blocks.iter().map(|b| (b.0.as_str(), b.1..b.1 + b.2))
    }
}

/// Likelihood, prior and Jacobian contributions to a log posterior.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogDensityTerms {
    pub likelihood: f64,
    pub prior: f64,
    pub jacobian: f64,
}

impl LogDensityTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.prior + self.jacobian
    }
}

/// Scale parameter that is either sampled on the log scale or fixed.
#[derive(Debug, Clone)]
pub(crate) struct ScaleSlot {
    pub prior: ScalePrior,
    pub index: Option<usize>,
}

impl ScaleSlot {
    pub fn new(layout: &mut ParamLayout, name: &str, prior: ScalePrior, active: bool) -> Self {
        let index = (active && prior.is_free()).then(|| layout.push(name, 1).start);
        Self { prior, index }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        match (self.index, self.prior) {
            (Some(i), _) => u[i].exp(),
            (None, ScalePrior::Fixed { value }) => value,
            // Inactive free scale (its level is absent from the data).
            (None, ScalePrior::HalfNormal { mean, .. }) => mean.max(1.0),
        }
    }

    /// Adds prior and Jacobian terms. `grad_sigma` is the accumulated
    /// derivative of the rest of the density with respect to sigma.
    pub fn finish(&self, u: &[f64], sigma: f64, grad_sigma: f64, terms: &mut LogDensityTerms, grad: Option<&mut [f64]>) {
        if let Some(i) = self.index {
            let (lp, dlp) = self.prior.log_density(sigma);
            terms.prior += lp;
            terms.jacobian += u[i];
            if let Some(g) = grad {
                g[i] += (grad_sigma + dlp) * sigma + 1.0;
            }
        }
    }
}

//! Dynamic Hamiltonian Monte Carlo (multinomial NUTS) with staged warmup,
//! plus split R-hat and bulk ESS diagnostics.

mod adapt;
pub mod diagnostics;
mod nuts;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diagnostics::{compute_diagnostics, split_rhat, bulk_ess, Diagnostics, ParamDiagnostics};
pub use nuts::{energy_error, leapfrog_round_trip, nuts_sample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("log density is not finite")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler settings: {0}")]
    Settings(String),
    #[error("no finite initial point for chain {chain} after {attempts} attempts")]
    Initialization { chain: usize, attempts: usize },
}

/// A differentiable log density on an unconstrained space, together with
/// the map back to named constrained parameters.
pub trait Model: Sync {
    fn dim(&self) -> usize;

    /// Log density at `position`; the gradient is written into `grad`.
    fn log_density(&self, position: &[f64], grad: &mut [f64]) -> Result<f64, DensityError>;

    /// Centre of the random initialization.
    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Maps an unconstrained position to the constrained parameters named by
    /// [`Model::param_names`].
    fn constrain(&self, position: &[f64]) -> Vec<f64> {
        position.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub master_seed: u64,
    /// Half-width of the uniform jitter around the model's initial point.
    pub init_jitter: f64,
    pub adapt: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_draws: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            master_seed: 20190101,
            init_jitter: 0.5,
            adapt: true,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Settings(m.to_string()));
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1");
        }
        if self.n_draws == 0 {
            return bad("n_draws must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if self.adapt && self.n_warmup < 100 {
            return bad("n_warmup must be at least 100 when adaptation is enabled");
        }
        if self.max_tree_depth == 0 {
            return bad("max_tree_depth must be at least 1");
        }
        if !(self.init_jitter >= 0.0) {
            return bad("init_jitter must be non-negative");
        }
        Ok(())
    }
}

/// Per-transition sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawStats {
    pub divergent: bool,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub energy: f64,
    pub accept_stat: f64,
    pub step_size: f64,
    pub log_density: f64,
}

/// Step size and inverse mass diagonal in force after warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

/// Post-warmup draws in constrained space, chain-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    n_chains: usize,
    n_draws: usize,
    values: Vec<f64>,
    unconstrained: Vec<f64>,
    unconstrained_dim: usize,
    stats: Vec<DrawStats>,
    adaptation: Vec<Adaptation>,
}

impl PosteriorDraws {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains * self.n_draws
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Constrained draw `d` of chain `c`.
    pub fn draw(&self, chain: usize, d: usize) -> &[f64] {
        let dim = self.dim();
        let start = (chain * self.n_draws + d) * dim;
        &self.values[start..start + dim]
    }

    /// All draws pooled across chains, in chain-major order.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim().max(1))
    }

    pub fn unconstrained_draw(&self, chain: usize, d: usize) -> &[f64] {
        let dim = self.unconstrained_dim;
        let start = (chain * self.n_draws + d) * dim;
        &self.unconstrained[start..start + dim]
    }

    /// Chains of one parameter.
    pub fn param_chains(&self, p: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| (0..self.n_draws).map(|d| self.draw(c, d)[p]).collect())
            .collect()
    }

    /// Pooled draws of one parameter.
    pub fn param_values(&self, p: usize) -> Vec<f64> {
        self.iter_draws().map(|d| d[p]).collect()
    }

    pub fn stats(&self) -> &[DrawStats] {
        &self.stats
    }

    pub fn chain_stats(&self, chain: usize) -> &[DrawStats] {
        &self.stats[chain * self.n_draws..(chain + 1) * self.n_draws]
    }

    pub fn adaptation(&self) -> &[Adaptation] {
        &self.adaptation
    }

    pub fn n_divergent(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    /// Builds draws from already constrained values; sampler statistics are
    /// left empty. Used when reading draws back from disk and in tests.
    pub fn from_values(names: Vec<String>, n_chains: usize, n_draws: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), names.len() * n_chains * n_draws, "draw array has the wrong size");
        Self {
            names,
            n_chains,
            n_draws,
            values,
            unconstrained: Vec::new(),
            unconstrained_dim: 0,
            stats: Vec::new(),
            adaptation: Vec::new(),
        }
    }
}

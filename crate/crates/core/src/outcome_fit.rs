//! Fitting the pooled outcome model and extracting exposure-response
//! curves with pointwise credible bands.

use serde::{Deserialize, Serialize};

use crate::model::{BetaConstraint, ErcMode, OutcomeDataset, OutcomeModel, OutcomeParams, OutcomePriors};
use crate::sampler::{nuts_sample, Diagnostics, PosteriorDraws, SamplerSettings};
use crate::spline::{ISplineBasis, KnotSet, SplineError};
use crate::summary::{describe, diagnose_and_summarize, ParamSummary};
use crate::FitError;

/// Default boundary knots of the exposure-response basis, in µg/m³.
pub const DEFAULT_BOUNDARY_UGM3: (f64, f64) = (50.0, 2200.0);
/// Default interior knots of the exposure-response basis, in µg/m³.
pub const DEFAULT_INTERIOR_UGM3: [f64; 6] = [60.0, 85.0, 100.0, 125.0, 200.0, 500.0];
pub const DEFAULT_ERC_ORDER: usize = 3;
/// Number of log-spaced points between the boundary knots in a default grid.
pub const DEFAULT_GRID_POINTS: usize = 200;

/// Exposure-response basis and how its coefficients are modelled. Knots and
/// `x_ref` are on the log-concentration scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ErcSpec {
    pub knots: KnotSet,
    pub order: usize,
    pub mode: ErcMode,
    pub constraint: BetaConstraint,
    /// Exposure at which relative curves are anchored at log odds 0.
    pub x_ref: f64,
}

impl ErcSpec {
    /// Anchored at the lower boundary knot.
    pub fn new(knots: KnotSet, order: usize, mode: ErcMode, constraint: BetaConstraint) -> Self {
        let x_ref = knots.lower();
        Self { knots, order, mode, constraint, x_ref }
    }

    /// Knots given in µg/m³, converted to the log scale.
    pub fn from_ugm3(lower: f64, upper: f64, interior: &[f64], order: usize) -> Result<Self, SplineError> {
        if lower <= 0.0 || interior.iter().any(|v| *v <= 0.0) {
            return Err(SplineError::InvalidKnots("concentrations must be positive".into()));
        }
        let knots = KnotSet::new(lower.ln(), upper.ln(), interior.iter().map(|v| v.ln()).collect())?;
        Ok(Self::new(knots, order, ErcMode::Shared, BetaConstraint::Free))
    }

    pub fn with_mode(mut self, mode: ErcMode, constraint: BetaConstraint) -> Self {
        self.mode = mode;
        self.constraint = constraint;
        self
    }

    pub fn basis(&self) -> Result<ISplineBasis, SplineError> {
        ISplineBasis::new(self.order, &self.knots)
    }
}

impl Default for ErcSpec {
    fn default() -> Self {
        let (lo, hi) = DEFAULT_BOUNDARY_UGM3;
        Self::from_ugm3(lo, hi, &DEFAULT_INTERIOR_UGM3, DEFAULT_ERC_ORDER).expect("default knots are valid")
    }
}

#[derive(Debug, Clone)]
pub struct OutcomePosterior {
    model: OutcomeModel,
    erc: ErcSpec,
    draws: PosteriorDraws,
    diagnostics: Diagnostics,
    summaries: Vec<ParamSummary>,
    warnings: Vec<String>,
}

/// Builds the outcome model for `erc` and samples it.
pub fn fit_outcome(
    data: OutcomeDataset,
    priors: OutcomePriors,
    erc: &ErcSpec,
    settings: &SamplerSettings,
) -> Result<OutcomePosterior, FitError> {
    let model = OutcomeModel::new(data, priors, erc.basis()?, erc.mode, erc.constraint)?;
    let mut pre = Vec::new();
    let constant = model.constant_erc_columns();
    if !constant.is_empty() {
        let cols: Vec<String> = constant.iter().map(|j| (j + 1).to_string()).collect();
        let msg = format!(
            "exposure-response basis columns {} are constant within every study; their coefficients are informed by the prior only",
            cols.join(", ")
        );
        log::warn!("{msg}");
        pre.push(msg);
    }
    let draws = nuts_sample(&model, settings)?;
    let mut post = OutcomePosterior::from_draws(model, erc.clone(), draws);
    pre.append(&mut post.warnings);
    post.warnings = pre;
    Ok(post)
}

impl OutcomePosterior {
    pub fn from_draws(model: OutcomeModel, erc: ErcSpec, draws: PosteriorDraws) -> Self {
        let (diagnostics, summaries) = diagnose_and_summarize(&draws);
        let mut warnings = diagnostics.warnings.clone();
        for p in &diagnostics.params {
            if p.name.starts_with("sigma_") {
                if let Some(r) = p.rhat.filter(|r| *r > crate::exposure_fit::RHAT_THRESHOLD) {
                    warnings.push(format!("{}: R-hat {r:.3} exceeds {}", p.name, crate::exposure_fit::RHAT_THRESHOLD));
                }
            }
        }
        Self { model, erc, draws, diagnostics, summaries, warnings }
    }

    pub fn model(&self) -> &OutcomeModel {
        &self.model
    }

    pub fn erc(&self) -> &ErcSpec {
        &self.erc
    }

    pub fn draws(&self) -> &PosteriorDraws {
        &self.draws
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn summaries(&self) -> &[ParamSummary] {
        &self.summaries
    }

    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn converged(&self) -> bool {
        !self.warnings.iter().any(|w| w.contains("R-hat") && w.contains("exceeds"))
    }

    pub fn param_draws(&self) -> impl Iterator<Item = OutcomeParams> + '_ {
        self.draws.iter_draws().map(|d| self.model.unflatten(d))
    }
}

/// What is added to the relative curve `g(x)'b - g(x_ref)'b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurveAnchor {
    /// Nothing: log relative odds against `x_ref`.
    #[default]
    Relative,
    /// The intercept of one study.
    Study(usize),
    /// The average of the study intercepts.
    MeanIntercept,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErcCurve {
    pub mode: ErcMode,
    /// Study label for per-study curves.
    pub study: Option<String>,
    pub x_log: Vec<f64>,
    pub x_ugm3: Vec<f64>,
    pub mean: Vec<f64>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
}

/// `n` points evenly spaced on the log scale between the boundary knots,
/// extended by the observed extremes when they fall outside.
pub fn curve_grid(erc: &ErcSpec, n: usize, observed: Option<(f64, f64)>) -> Vec<f64> {
    let (lo, hi) = (erc.knots.lower(), erc.knots.upper());
    let mut grid: Vec<f64> = match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    };
    if let Some((a, b)) = observed {
        if a < lo {
            grid.insert(0, a);
        }
        if b > hi {
            grid.push(b);
        }
    }
    grid
}

/// Observed range of exposures in the data.
pub fn exposure_range(data: &OutcomeDataset) -> Option<(f64, f64)> {
    data.records().iter().map(|r| r.x).fold(None, |acc, x| match acc {
        None => Some((x, x)),
        Some((a, b)) => Some((a.min(x), b.max(x))),
    })
}

/// Coefficients of the overall curve in a draw: the shared vector, or the
/// average over studies of the study vectors.
fn overall_beta(p: &OutcomeParams) -> Vec<f64> {
    let n = p.beta.len() as f64;
    let j_n = p.beta.first().map_or(0, |b| b.len());
    (0..j_n).map(|j| p.beta.iter().map(|b| b[j]).sum::<f64>() / n).collect()
}

fn anchor_value(p: &OutcomeParams, anchor: CurveAnchor) -> f64 {
    match anchor {
        CurveAnchor::Relative => 0.0,
        CurveAnchor::Study(s) => p.psi[s],
        CurveAnchor::MeanIntercept => p.psi.iter().sum::<f64>() / p.psi.len() as f64,
    }
}

fn curve_for(basis: &ISplineBasis, grid_rows: &[Vec<f64>], ref_row: &[f64], beta: &[f64], offset: f64) -> Vec<f64> {
    let r: f64 = ref_row.iter().zip(beta).map(|(a, b)| a * b).sum();
    debug_assert_eq!(basis.n_basis(), beta.len());
    grid_rows.iter().map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() - r + offset).collect()
}

/// Per-draw curve values on `grid`, draw-major. `study` selects a study's
/// own coefficients in hierarchical fits; otherwise the overall curve is
/// used (the average of study coefficients when hierarchical).
pub fn curve_draws(
    post: &OutcomePosterior,
    grid: &[f64],
    anchor: CurveAnchor,
    study: Option<usize>,
) -> Result<Vec<Vec<f64>>, FitError> {
    let n_studies = post.model.data().n_studies();
    if let CurveAnchor::Study(s) = anchor {
        if s >= n_studies {
            return Err(FitError::Input(format!("anchor study index {s} out of range")));
        }
    }
    if let Some(s) = study {
        if post.model.mode() != ErcMode::Hierarchical {
            return Err(FitError::Input("per-study curves need a hierarchical fit".into()));
        }
        if s >= n_studies {
            return Err(FitError::Input(format!("study index {s} out of range")));
        }
    }
    let basis = post.model.basis();
    let rows: Vec<Vec<f64>> = grid.iter().map(|&x| basis.row(x)).collect();
    let ref_row = basis.row(post.erc.x_ref);
    Ok(post
        .param_draws()
        .map(|p| {
            let beta = match study {
                Some(s) => p.beta[s].clone(),
                None => overall_beta(&p),
            };
            curve_for(basis, &rows, &ref_row, &beta, anchor_value(&p, anchor))
        })
        .collect())
}

fn summarize_curve(mode: ErcMode, study: Option<String>, grid: &[f64], draws: &[Vec<f64>]) -> ErcCurve {
    let n = grid.len();
    let (mut mean, mut q025, mut q975) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut column = Vec::with_capacity(draws.len());
    for i in 0..n {
        column.clear();
        column.extend(draws.iter().map(|d| d[i]));
        let (m, _, lo, _, hi) = describe(&column);
        mean.push(m);
        q025.push(lo);
        q975.push(hi);
    }
    ErcCurve { mode, study, x_log: grid.to_vec(), x_ugm3: grid.iter().map(|x| x.exp()).collect(), mean, q025, q975 }
}

/// Posterior mean and 95% band of the overall curve on `grid` (log scale).
pub fn extract_curve(post: &OutcomePosterior, grid: &[f64], anchor: CurveAnchor) -> Result<ErcCurve, FitError> {
    let draws = curve_draws(post, grid, anchor, None)?;
    Ok(summarize_curve(post.model.mode(), None, grid, &draws))
}

/// One relative curve per study from a hierarchical fit, each anchored at
/// log odds 0 at `x_ref`.
pub fn hierarchical_curves(post: &OutcomePosterior, grid: &[f64]) -> Result<Vec<ErcCurve>, FitError> {
    let studies = post.model.data().studies().to_vec();
    studies
        .into_iter()
        .enumerate()
        .map(|(s, label)| {
            let draws = curve_draws(post, grid, CurveAnchor::Relative, Some(s))?;
            Ok(summarize_curve(ErcMode::Hierarchical, Some(label), grid, &draws))
        })
        .collect()
}

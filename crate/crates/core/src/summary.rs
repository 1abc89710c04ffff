//! Posterior summaries per parameter.

use crate::sampler::{compute_diagnostics, Diagnostics, PosteriorDraws};
use crate::spline::quantile_sorted;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
    pub rhat: Option<f64>,
    pub ess: f64,
}

/// Mean, standard deviation and the 2.5%, 50%, 97.5% quantiles of `values`.
pub fn describe(values: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (mean, sd, quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.5), quantile_sorted(&sorted, 0.975))
}

pub fn summarize(draws: &PosteriorDraws, diagnostics: &Diagnostics) -> Vec<ParamSummary> {
    draws
        .names()
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let (mean, sd, q025, q500, q975) = describe(&draws.param_values(p));
            let d = &diagnostics.params[p];
            ParamSummary { name: name.clone(), mean, sd, q025, q500, q975, rhat: d.rhat, ess: d.ess_bulk }
        })
        .collect()
}

/// Diagnostics and summaries in one pass over the draws.
pub fn diagnose_and_summarize(draws: &PosteriorDraws) -> (Diagnostics, Vec<ParamSummary>) {
    let d = compute_diagnostics(draws);
    let s = summarize(draws, &d);
    (d, s)
}

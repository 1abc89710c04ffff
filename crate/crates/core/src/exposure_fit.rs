//! Fitting the exposure model, household long-term means, pooling factors
//! and assignment of trailing-window exposures to subjects.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{ExposureDataset, ExposureModel, ExposureParams, ExposurePriors};
use crate::sampler::{nuts_sample, Diagnostics, PosteriorDraws, SamplerSettings};
use crate::summary::{describe, diagnose_and_summarize, ParamSummary};
use crate::FitError;

/// R-hat above this on a variance component marks the fit as unconverged.
pub const RHAT_THRESHOLD: f64 = 1.05;

#[derive(Debug, Clone)]
pub struct ExposurePosterior {
    model: ExposureModel,
    draws: PosteriorDraws,
    diagnostics: Diagnostics,
    summaries: Vec<ParamSummary>,
    fitted: Vec<f64>,
    warnings: Vec<String>,
}

pub fn fit_exposure(
    data: ExposureDataset,
    priors: ExposurePriors,
    settings: &SamplerSettings,
) -> Result<ExposurePosterior, FitError> {
    if !data.is_clustered() {
        log::info!("no cluster labels: cluster effect disabled");
    }
    let model = ExposureModel::new(data, priors)?;
    let draws = nuts_sample(&model, settings)?;
    Ok(ExposurePosterior::from_draws(model, draws))
}

impl ExposurePosterior {
    /// Wraps existing draws of `model`'s constrained parameters.
    pub fn from_draws(model: ExposureModel, draws: PosteriorDraws) -> Self {
        let (diagnostics, summaries) = diagnose_and_summarize(&draws);
        let mut warnings = diagnostics.warnings.clone();
        for p in &diagnostics.params {
            if p.name.starts_with("sigma_") {
                if let Some(r) = p.rhat.filter(|r| *r > RHAT_THRESHOLD) {
                    warnings.push(format!("{}: R-hat {r:.3} exceeds {RHAT_THRESHOLD}", p.name));
                }
            }
        }
        for w in &warnings {
            log::warn!("exposure fit: {w}");
        }
        let mut fitted = vec![0.0; model.data().n_obs()];
        let n = draws.total_draws() as f64;
        for d in draws.iter_draws() {
            for (f, v) in fitted.iter_mut().zip(model.fitted(&model.unflatten(d))) {
                *f += v / n;
            }
        }
        Self { model, draws, diagnostics, summaries, fitted, warnings }
    }

    pub fn model(&self) -> &ExposureModel {
        &self.model
    }

    pub fn data(&self) -> &ExposureDataset {
        self.model.data()
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

    /// Posterior mean of each observation's mean, trend included.
    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// No variance component has R-hat above [`RHAT_THRESHOLD`].
    pub fn converged(&self) -> bool {
        !self.warnings.iter().any(|w| w.contains("R-hat") && w.contains("exceeds"))
    }

    pub fn param_draws(&self) -> impl Iterator<Item = ExposureParams> + '_ {
        self.draws.iter_draws().map(|d| self.model.unflatten(d))
    }

    /// Per-draw long-term mean `eta_g + alpha_k + alpha_i` of every unit,
    /// draw-major.
    pub fn unit_mean_draws(&self) -> Vec<Vec<f64>> {
        let units = self.data().units();
        self.param_draws().map(|p| units.iter().map(|&u| self.model.unit_mean(&p, u)).collect()).collect()
    }

    fn unit_keys(&self) -> Vec<UnitKey> {
        let d = self.data();
        d.units()
            .iter()
            .map(|u| UnitKey {
                group: d.groups()[u.group].clone(),
                cluster: d.cluster_of(u.household).map(|k| d.clusters()[k].clone()),
                household: d.households()[u.household].label.clone(),
            })
            .collect()
    }

    /// Posterior mean, sd and 95% interval of each unit's long-term mean.
    /// The time trend is not part of these means.
    pub fn household_means(&self) -> HouseholdMeans {
        let draws = self.unit_mean_draws();
        let rows = self
            .unit_keys()
            .into_iter()
            .enumerate()
            .map(|(j, key)| {
                let v: Vec<f64> = draws.iter().map(|d| d[j]).collect();
                let (mean, sd, q025, _, q975) = describe(&v);
                HouseholdMean { key, mean, sd, q025, q975 }
            })
            .collect();
        HouseholdMeans::new(rows)
    }

    /// Unit means from a single pooled draw (chain-major index), for
    /// propagating exposure uncertainty.
    pub fn household_draw(&self, index: usize) -> Result<HouseholdMeans, FitError> {
        let total = self.draws.total_draws();
        let draw = self
            .draws
            .iter_draws()
            .nth(index)
            .ok_or_else(|| FitError::Input(format!("draw {index} out of range (0..{total})")))?;
        let keys = self.unit_keys();
        let values = unit_values_from_draw(self.draws.names(), draw, &keys)?;
        Ok(HouseholdMeans::new(
            keys.into_iter()
                .zip(values)
                .map(|(key, v)| HouseholdMean { key, mean: v, sd: 0.0, q025: v, q975: v })
                .collect(),
        ))
    }

    /// Posterior mean of the trend at each observation's model time.
    pub fn trend_at_obs(&self) -> Vec<f64> {
        let n = self.draws.total_draws() as f64;
        let mut out = vec![0.0; self.data().n_obs()];
        for p in self.param_draws() {
            for (o, t) in out.iter_mut().zip(self.model.trend_at_obs(&p.theta)) {
                *o += t / n;
            }
        }
        out
    }

    /// Pooling factors at the household, cluster and observation levels.
    pub fn pooling_factors(&self, variant: PoolingVariant) -> PoolingReport {
        let params: Vec<ExposureParams> = self.param_draws().collect();
        let pick = |f: &dyn Fn(&ExposureParams) -> f64| -> Vec<f64> { params.iter().map(f).collect() };
        let household_effects: Vec<Vec<f64>> = params.iter().map(|p| p.alpha_household.clone()).collect();
        let household = match variant {
            PoolingVariant::DrawWise => pooling_factor(&household_effects),
            PoolingVariant::PlugIn => pooling_factor_plug_in(&household_effects, &pick(&|p| p.sigma_h)),
        };
        let cluster = self.data().is_clustered().then(|| {
            let e: Vec<Vec<f64>> = params.iter().map(|p| p.alpha_cluster.clone()).collect();
            match variant {
                PoolingVariant::DrawWise => pooling_factor(&e),
                PoolingVariant::PlugIn => pooling_factor_plug_in(&e, &pick(&|p| p.sigma_k)),
            }
        });
        let residuals: Vec<Vec<f64>> = params
            .iter()
            .map(|p| {
                self.model.fitted(p).iter().zip(self.data().observations()).map(|(m, o)| o.w - m).collect()
            })
            .collect();
        let observation = match variant {
            PoolingVariant::DrawWise => pooling_factor(&residuals),
            PoolingVariant::PlugIn => pooling_factor_plug_in(&residuals, &pick(&|p| p.sigma_w)),
        };
        PoolingReport { household, cluster, observation }
    }
}

/// Identifies a long-term mean: stove group, optional cluster, household.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitKey {
    pub group: String,
    pub cluster: Option<String>,
    pub household: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdMean {
    pub key: UnitKey,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Long-term household means indexed by (group, household).
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdMeans {
    rows: Vec<HouseholdMean>,
    index: HashMap<(String, String), usize>,
}

impl HouseholdMeans {
    pub fn new(rows: Vec<HouseholdMean>) -> Self {
        let index = rows
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.key.group.clone(), r.key.household.clone()), i))
            .collect();
        Self { rows, index }
    }

    pub fn rows(&self) -> &[HouseholdMean] {
        &self.rows
    }

    pub fn get(&self, group: &str, household: &str) -> Option<&HouseholdMean> {
        self.index.get(&(group.to_string(), household.to_string())).map(|&i| &self.rows[i])
    }

    pub fn mean(&self, group: &str, household: &str) -> Option<f64> {
        self.get(group, household).map(|r| r.mean)
    }

    /// Same table with every mean multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self::new(
            self.rows
                .iter()
                .map(|r| HouseholdMean { mean: r.mean * c, sd: r.sd * c.abs(), q025: r.q025 * c, q975: r.q975 * c, ..r.clone() })
                .collect(),
        )
    }
}

/// Long-term means of `keys` from one constrained draw, looked up by the
/// parameter names `eta[..]`, `alpha_cluster[..]` and `alpha_household[..]`.
pub fn unit_values_from_draw(names: &[String], draw: &[f64], keys: &[UnitKey]) -> Result<Vec<f64>, FitError> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let get = |name: String| -> Result<f64, FitError> {
        index.get(name.as_str()).map(|&i| draw[i]).ok_or_else(|| FitError::Input(format!("draw has no parameter {name}")))
    };
    keys.iter()
        .map(|k| {
            let mut v = get(format!("eta[{}]", k.group))? + get(format!("alpha_household[{}]", k.household))?;
            if let Some(c) = &k.cluster {
                v += get(format!("alpha_cluster[{c}]"))?;
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolingVariant {
    /// Denominator is the posterior mean of the across-unit variance of the
    /// effects in each draw.
    #[default]
    DrawWise,
    /// Denominator is the posterior mean of the level's variance parameter.
    PlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingReport {
    pub household: f64,
    /// `None` when the data have no clusters.
    pub cluster: Option<f64>,
    pub observation: f64,
}

fn sample_var(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn finish_pooling(numerator: f64, denominator: f64) -> f64 {
    if !(denominator > 0.0) {
        return 1.0;
    }
    (1.0 - numerator / denominator).clamp(0.0, 1.0)
}

fn variance_of_means(effects: &[Vec<f64>]) -> f64 {
    let n_units = effects.first().map_or(0, |e| e.len());
    let n = effects.len() as f64;
    let means: Vec<f64> = (0..n_units).map(|j| effects.iter().map(|d| d[j]).sum::<f64>() / n).collect();
    sample_var(&means)
}

/// `1 - V(E[effect]) / E[V(effect)]` with `V` the sample variance across
/// units; `effects` is draw-major. Clipped to [0, 1], and 1 when the
/// denominator vanishes. Fewer than two units also give 1.
pub fn pooling_factor(effects: &[Vec<f64>]) -> f64 {
    if effects.is_empty() || effects[0].len() < 2 {
        return 1.0;
    }
    let denom = effects.iter().map(|d| sample_var(d)).sum::<f64>() / effects.len() as f64;
    finish_pooling(variance_of_means(effects), denom)
}

/// As [`pooling_factor`] with the denominator replaced by the posterior
/// mean of `sigma^2`.
pub fn pooling_factor_plug_in(effects: &[Vec<f64>], sigma_draws: &[f64]) -> f64 {
    if effects.is_empty() || effects[0].len() < 2 || sigma_draws.is_empty() {
        return 1.0;
    }
    let denom = sigma_draws.iter().map(|s| s * s).sum::<f64>() / sigma_draws.len() as f64;
    finish_pooling(variance_of_means(effects), denom)
}

/// One stretch of a subject's follow-up in a single household, inclusive
/// of both end days.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_day: i64,
    pub end_day: i64,
    pub group: String,
    pub cluster: Option<String>,
    pub household: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTimeline {
    subject: String,
    segments: Vec<Segment>,
}

impl SubjectTimeline {
    /// Sorts segments by start day and checks that they are non-empty,
    /// non-overlapping and contiguous.
    pub fn new(subject: &str, mut segments: Vec<Segment>) -> Result<Self, FitError> {
        if segments.is_empty() {
            return Err(FitError::Input(format!("subject {subject}: timeline has no segments")));
        }
        segments.sort_by_key(|s| s.start_day);
        for s in &segments {
            if s.end_day < s.start_day {
                return Err(FitError::Input(format!(
                    "subject {subject}: segment ends on day {} before it starts on day {}",
                    s.end_day, s.start_day
                )));
            }
        }
        for w in segments.windows(2) {
            if w[1].start_day <= w[0].end_day {
                return Err(FitError::Input(format!("subject {subject}: segments overlap on day {}", w[1].start_day)));
            }
            if w[1].start_day != w[0].end_day + 1 {
                return Err(FitError::Input(format!(
                    "subject {subject}: gap between day {} and day {}",
                    w[0].end_day, w[1].start_day
                )));
            }
        }
        Ok(Self { subject: subject.to_string(), segments })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn start_day(&self) -> i64 {
        self.segments[0].start_day
    }

    pub fn end_day(&self) -> i64 {
        self.segments[self.segments.len() - 1].end_day
    }

    /// Segment covering `day`, if any.
    pub fn segment_at(&self, day: i64) -> Option<&Segment> {
        let i = self.segments.partition_point(|s| s.end_day < day);
        self.segments.get(i).filter(|s| s.start_day <= day)
    }
}

/// What to do when a window reaches back before the timeline starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// Average over the covered days only and log a warning.
    #[default]
    Truncate,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentSource {
    PosteriorMean,
    Draw(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureAssignment {
    pub subject: String,
    pub period: i64,
    /// Last day of the window.
    pub day: i64,
    pub x: f64,
    pub washout: usize,
    /// Number of days actually averaged.
    pub covered_days: usize,
    pub source: AssignmentSource,
}

/// Trailing `washout`-day average of the household long-term means a
/// subject was exposed to, evaluated at each `(period, day)`.
pub fn assign_exposure(
    timeline: &SubjectTimeline,
    means: &HouseholdMeans,
    washout: usize,
    periods: &[(i64, i64)],
    policy: WindowPolicy,
    source: AssignmentSource,
) -> Result<Vec<ExposureAssignment>, FitError> {
    if washout == 0 {
        return Err(FitError::Input("washout must be at least one day".into()));
    }
    let seg_means: Vec<f64> = timeline
        .segments
        .iter()
        .map(|s| {
            means.mean(&s.group, &s.household).ok_or_else(|| {
                FitError::Input(format!(
                    "subject {}: household {} in group {} has no long-term mean",
                    timeline.subject, s.household, s.group
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(periods.len());
    for &(period, day) in periods {
        if day > timeline.end_day() || day < timeline.start_day() {
            return Err(FitError::Input(format!(
                "subject {}: day {day} (period {period}) is outside follow-up {}..{}",
                timeline.subject,
                timeline.start_day(),
                timeline.end_day()
            )));
        }
        let first = day - washout as i64 + 1;
        if first < timeline.start_day() {
            match policy {
                WindowPolicy::Error => {
                    return Err(FitError::Input(format!(
                        "subject {}: window for period {period} starts on day {first}, before follow-up starts on day {}",
                        timeline.subject,
                        timeline.start_day()
                    )))
                }
                WindowPolicy::Truncate => log::warn!(
                    "subject {}: window for period {period} truncated to {} days",
                    timeline.subject,
                    day - timeline.start_day() + 1
                ),
            }
        }
        let lo = first.max(timeline.start_day());
        // Overlap of [lo, day] with each segment.
        let mut total = 0.0;
        for (s, m) in timeline.segments.iter().zip(&seg_means) {
            let a = s.start_day.max(lo);
            let b = s.end_day.min(day);
            if b >= a {
                total += (b - a + 1) as f64 * m;
            }
        }
        let covered = (day - lo + 1) as usize;
        out.push(ExposureAssignment {
            subject: timeline.subject.clone(),
            period,
            day,
            x: total / covered as f64,
            washout,
            covered_days: covered,
            source,
        });
    }
    Ok(out)
}

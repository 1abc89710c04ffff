//! Simulation studies: exposure data generators with known truths, the
//! three long-term mean estimators and their error tables, and outcome
//! simulations scored by pointwise curve bias and RMSE.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::exposure_fit::{fit_exposure, ExposurePosterior};
use crate::model::{BetaConstraint, ErcMode, ExposureDataset, ExposureDatasetBuilder, ExposurePriors, OutcomeDataset, OutcomeDatasetBuilder, OutcomePriors};
use crate::outcome_fit::{curve_draws, fit_outcome, CurveAnchor, ErcSpec};
use crate::sampler::SamplerSettings;
use crate::spline::KnotSet;
use crate::FitError;

/// Shape and variance parameters of a simulated exposure study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureSimSetup {
    pub name: String,
    pub group_means: Vec<f64>,
    /// Zero disables clustering; households are then drawn per group.
    pub clusters_per_group: usize,
    /// Households per cluster, or per group without clustering.
    pub households_per_cluster: usize,
    pub obs_per_household: usize,
    pub sigma_w: f64,
    pub sigma_h: f64,
    pub sigma_k: f64,
    pub trend_amplitude: f64,
    pub trend_period_days: f64,
    /// Observation days are drawn uniformly from `1..=n_days`.
    pub n_days: i64,
    /// Length in days of one model time step.
    pub days_per_step: i64,
}

impl ExposureSimSetup {
    pub fn setup1() -> Self {
        Self {
            name: "setup1".into(),
            group_means: vec![4.0, 5.0],
            clusters_per_group: 12,
            households_per_cluster: 50,
            obs_per_household: 2,
            sigma_w: 0.8,
            sigma_h: 0.3,
            sigma_k: 0.2,
            trend_amplitude: 0.5,
            trend_period_days: 365.0,
            n_days: 365,
            days_per_step: 7,
        }
    }

    pub fn setup2() -> Self {
        Self { name: "setup2".into(), group_means: vec![3.0, 6.0], sigma_w: 0.4, trend_amplitude: 0.2, ..Self::setup1() }
    }

    pub fn setup3() -> Self {
        Self {
            name: "setup3".into(),
            group_means: vec![4.0, 4.3, 4.8, 6.0],
            clusters_per_group: 0,
            households_per_cluster: 200,
            obs_per_household: 1,
            sigma_w: 1.0,
            sigma_h: 0.5,
            sigma_k: 0.0,
            ..Self::setup1()
        }
    }

    /// Setup by number (1, 2 or 3).
    pub fn preset(id: u8) -> Option<Self> {
        match id {
            1 => Some(Self::setup1()),
            2 => Some(Self::setup2()),
            3 => Some(Self::setup3()),
            _ => None,
        }
    }

    pub fn is_clustered(&self) -> bool {
        self.clusters_per_group > 0
    }

    pub fn trend(&self, day: i64) -> f64 {
        self.trend_amplitude * (2.0 * PI * day as f64 / self.trend_period_days).sin()
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: String| Err(FitError::Input(format!("simulation setup {}: {m}", self.name)));
        if self.group_means.is_empty() {
            return bad("no groups".into());
        }
        if self.households_per_cluster == 0 || self.obs_per_household == 0 {
            return bad("households and observations per household must be positive".into());
        }
        for (n, v) in [("sigma_w", self.sigma_w), ("sigma_h", self.sigma_h), ("sigma_k", self.sigma_k)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{n} must be non-negative"));
            }
        }
        if self.n_days < 1 || self.days_per_step < 1 || !(self.trend_period_days > 0.0) {
            return bad("day grid, step length and trend period must be positive".into());
        }
        Ok(())
    }
}

/// Values at the group, cluster and household levels, indexed like the
/// simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelValues {
    pub group: Vec<f64>,
    /// `None` without clustering.
    pub cluster: Option<Vec<f64>>,
    pub household: Vec<f64>,
}

/// Realized means of one replication.
pub type SimTruths = LevelValues;

#[derive(Debug, Clone)]
pub struct SimExposure {
    pub setup: ExposureSimSetup,
    pub data: ExposureDataset,
    pub truths: SimTruths,
}

fn normal(r: &mut impl Rng, sd: f64) -> f64 {
    sd * r.sample::<f64, _>(StandardNormal)
}

/// Draws one dataset. Labels are `g{g}`, `g{g}k{k}` and `g{g}k{k}h{i}`
/// (`g{g}h{i}` without clusters), with indices in generation order.
pub fn simulate_exposure(setup: &ExposureSimSetup, rng: &mut impl Rng) -> Result<SimExposure, FitError> {
    setup.validate()?;
    let mut b = ExposureDatasetBuilder::new();
    let mut cluster_truth = Vec::new();
    let mut household_truth = Vec::new();
    let n_clusters = setup.clusters_per_group.max(1);
    for (g, &eta) in setup.group_means.iter().enumerate() {
        for k in 0..n_clusters {
            let (cluster, mu_k) = if setup.is_clustered() {
                let mu = eta + normal(rng, setup.sigma_k);
                cluster_truth.push(mu);
                (Some(format!("g{g}k{k}")), mu)
            } else {
                (None, eta)
            };
            for i in 0..setup.households_per_cluster {
                let mu_i = mu_k + normal(rng, setup.sigma_h);
                household_truth.push(mu_i);
                let label = match &cluster {
                    Some(c) => format!("{c}h{i}"),
                    None => format!("g{g}h{i}"),
                };
                for _ in 0..setup.obs_per_household {
                    let day = rng.random_range(1..=setup.n_days);
                    let w = mu_i + setup.trend(day) + normal(rng, setup.sigma_w);
                    let step = ((day - 1) / setup.days_per_step) as f64;
                    b.add_observation(&format!("g{g}"), cluster.as_deref(), &label, day, step, w)?;
                }
            }
        }
    }
    let data = b.build()?;
    let truths = LevelValues {
        group: setup.group_means.clone(),
        cluster: setup.is_clustered().then_some(cluster_truth),
        household: household_truth,
    };
    Ok(SimExposure { setup: setup.clone(), data, truths })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Observation averages.
    Observed,
    /// Posterior mean including the time trend.
    WithTrend,
    /// Posterior mean excluding the time trend.
    WithoutTrend,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Observed, Estimator::WithTrend, Estimator::WithoutTrend];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Observed => "mu1",
            Estimator::WithTrend => "mu2",
            Estimator::WithoutTrend => "mu3",
        }
    }
}

/// Averages household values up to clusters and groups with equal weight
/// per household.
fn roll_up(data: &ExposureDataset, household: Vec<f64>) -> LevelValues {
    let mut g_sum = vec![(0.0, 0usize); data.n_groups()];
    let mut k_sum = vec![(0.0, 0usize); data.n_clusters()];
    for u in data.units() {
        let v = household[u.household];
        g_sum[u.group].0 += v;
        g_sum[u.group].1 += 1;
        if let Some(k) = data.cluster_of(u.household) {
            k_sum[k].0 += v;
            k_sum[k].1 += 1;
        }
    }
    let avg = |s: Vec<(f64, usize)>| s.into_iter().map(|(a, n)| a / n as f64).collect::<Vec<_>>();
    LevelValues {
        group: avg(g_sum),
        cluster: data.is_clustered().then(|| avg(k_sum)),
        household,
    }
}

/// Household averages of the raw observations.
pub fn observed_household_means(data: &ExposureDataset) -> Vec<f64> {
    let mut sums = vec![(0.0, 0usize); data.n_households()];
    for o in data.observations() {
        sums[o.household].0 += o.w;
        sums[o.household].1 += 1;
    }
    sums.into_iter().map(|(s, n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect()
}

/// The three estimators at every level, in the order of [`Estimator::ALL`].
pub fn estimators(post: &ExposurePosterior) -> [LevelValues; 3] {
    let data = post.data();
    let mu1 = observed_household_means(data);
    let means = post.household_means();
    let mut mu3 = vec![0.0; data.n_households()];
    for (u, row) in data.units().iter().zip(means.rows()) {
        mu3[u.household] = row.mean;
    }
    // Posterior-mean trend averaged over each household's observation times.
    let trend = post.trend_at_obs();
    let mut t_sum = vec![(0.0, 0usize); data.n_households()];
    for (o, t) in data.observations().iter().zip(trend) {
        t_sum[o.household].0 += t;
        t_sum[o.household].1 += 1;
    }
    let mu2: Vec<f64> =
        mu3.iter().zip(&t_sum).map(|(m, (s, n))| if *n > 0 { m + s / *n as f64 } else { *m }).collect();
    [roll_up(data, mu1), roll_up(data, mu2), roll_up(data, mu3)]
}

/// Squared-error sums of one estimate against the truths.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LevelErrors {
    pub group: f64,
    pub cluster: Option<f64>,
    pub household: f64,
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean squared error per level, averaged over units.
pub fn level_errors(estimate: &LevelValues, truth: &LevelValues) -> LevelErrors {
    LevelErrors {
        group: mean_sq(&estimate.group, &truth.group),
        cluster: match (&estimate.cluster, &truth.cluster) {
            (Some(e), Some(t)) => Some(mean_sq(e, t)),
            _ => None,
        },
        household: mean_sq(&estimate.household, &truth.household),
    }
}

/// Estimates and truths of one exposure replication.
#[derive(Debug, Clone)]
pub struct ExposureReplication {
    pub setup: String,
    pub truths: SimTruths,
    pub estimates: [LevelValues; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub setup: String,
    pub estimator: Estimator,
    /// MSE for groups; MSEP for clusters and households.
    pub errors: LevelErrors,
    pub n_replications: usize,
}

/// MSE and MSEP averaged over replications, one row per setup and
/// estimator, setups in order of first appearance.
pub fn error_table(replications: &[ExposureReplication]) -> Vec<ErrorRow> {
    let mut setups: Vec<&str> = Vec::new();
    for r in replications {
        if !setups.contains(&r.setup.as_str()) {
            setups.push(&r.setup);
        }
    }
    let mut rows = Vec::new();
    for s in setups {
        let reps: Vec<&ExposureReplication> = replications.iter().filter(|r| r.setup == s).collect();
        let n = reps.len() as f64;
        for (e, est) in Estimator::ALL.iter().enumerate() {
            let mut acc = LevelErrors::default();
            let mut cluster = 0.0;
            let mut has_cluster = false;
            for r in &reps {
                let le = level_errors(&r.estimates[e], &r.truths);
                acc.group += le.group / n;
                acc.household += le.household / n;
                if let Some(c) = le.cluster {
                    cluster += c / n;
                    has_cluster = true;
                }
            }
            acc.cluster = has_cluster.then_some(cluster);
            rows.push(ErrorRow { setup: s.to_string(), estimator: *est, errors: acc, n_replications: reps.len() });
        }
    }
    rows
}

/// Independent generator for replication `rep` of a study seeded by `seed`.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(rep as u64 + 1);
    r
}

/// Sampler settings used for simulation replications: one short chain
/// with a capped trajectory length.
pub fn replication_settings() -> SamplerSettings {
    SamplerSettings { n_chains: 1, n_warmup: 150, n_draws: 100, max_tree_depth: 6, ..Default::default() }
}

fn fit_settings(base: &SamplerSettings, rng: &mut impl Rng) -> SamplerSettings {
    SamplerSettings { master_seed: rng.random(), ..base.clone() }
}

/// Simulates and fits one exposure dataset.
pub fn exposure_replication(
    setup: &ExposureSimSetup,
    priors: &ExposurePriors,
    settings: &SamplerSettings,
    rng: &mut impl Rng,
) -> Result<(SimExposure, ExposurePosterior, ExposureReplication), FitError> {
    let sim = simulate_exposure(setup, rng)?;
    let post = fit_exposure(sim.data.clone(), priors.clone(), &fit_settings(settings, rng))?;
    let rep = ExposureReplication { setup: setup.name.clone(), truths: sim.truths.clone(), estimates: estimators(&post) };
    Ok((sim, post, rep))
}

/// Runs `n_replications` of every setup in parallel. Replication `b` of
/// setup `s` draws from stream `s * n_replications + b` of `seed`.
pub fn run_exposure_study(
    setups: &[ExposureSimSetup],
    priors: &ExposurePriors,
    settings: &SamplerSettings,
    n_replications: usize,
    seed: u64,
) -> Result<Vec<ExposureReplication>, FitError> {
    let jobs: Vec<(usize, usize)> =
        (0..setups.len()).flat_map(|s| (0..n_replications).map(move |b| (s, b))).collect();
    jobs.into_par_iter()
        .map(|(s, b)| {
            let mut rng = replication_rng(seed, s * n_replications + b);
            exposure_replication(&setups[s], priors, settings, &mut rng).map(|(_, _, r)| r)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErcForm {
    Linear,
    #[default]
    Logistic,
}

impl ErcForm {
    /// Log odds ratio of the generating curve at log exposure `x`.
    pub fn value(self, x: f64) -> f64 {
        match self {
            ErcForm::Linear => (1.0 + 0.5 * (x - 5f64.ln())).ln(),
            ErcForm::Logistic => (1.0 + 1.0 / (1.0 + (-3.0 * (x - 4.0)).exp())).ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeSimSetup {
    pub form: ErcForm,
    pub psi: f64,
    pub sigma_xi: f64,
    pub n_periods: usize,
    pub trials: u64,
    /// Amplitude of the cosine time trend, which completes one cycle over
    /// the periods.
    pub trend_amplitude: f64,
}

impl Default for OutcomeSimSetup {
    fn default() -> Self {
        Self { form: ErcForm::Logistic, psi: -3.0, sigma_xi: 0.25, n_periods: 12, trials: 1, trend_amplitude: 1.0 }
    }
}

impl OutcomeSimSetup {
    /// Time effect of period `t` (1-based).
    pub fn trend(&self, t: usize) -> f64 {
        self.trend_amplitude * (2.0 * PI * (t as f64 - 1.0) / self.n_periods as f64).cos()
    }

    /// True linear predictor without subject or time effects.
    pub fn curve(&self, x: f64) -> f64 {
        self.psi + self.form.value(x)
    }
}

/// Simulated cases of one study; exposures are attached when building a
/// dataset so the same outcomes can be fitted with different exposures.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub study: String,
    pub subjects: Vec<String>,
    /// Cases per subject and period.
    pub cases: Vec<Vec<u64>>,
    pub trials: u64,
}

pub fn simulate_outcome(
    setup: &OutcomeSimSetup,
    study: &str,
    subjects: &[String],
    x_true: &[f64],
    rng: &mut impl Rng,
) -> SimOutcome {
    assert_eq!(subjects.len(), x_true.len(), "one exposure per subject");
    let xi_dist = Normal::new(0.0, setup.sigma_xi).expect("valid subject sd");
    let cases = x_true
        .iter()
        .map(|&x| {
            let xi = xi_dist.sample(rng);
            (1..=setup.n_periods)
                .map(|t| {
                    let eta = setup.curve(x) + xi + setup.trend(t);
                    let p = 1.0 / (1.0 + (-eta).exp());
                    (0..setup.trials).filter(|_| rng.random::<f64>() < p).count() as u64
                })
                .collect()
        })
        .collect();
    SimOutcome { study: study.to_string(), subjects: subjects.to_vec(), cases, trials: setup.trials }
}

/// Outcome dataset combining studies, each paired with one exposure per
/// subject.
pub fn outcome_dataset(parts: &[(&SimOutcome, &[f64])]) -> Result<OutcomeDataset, FitError> {
    let mut b = OutcomeDatasetBuilder::new(Vec::new());
    for (sim, x) in parts {
        if x.len() != sim.subjects.len() {
            return Err(FitError::Input(format!("study {}: {} exposures for {} subjects", sim.study, x.len(), sim.subjects.len())));
        }
        for ((subject, cases), &xi) in sim.subjects.iter().zip(&sim.cases).zip(x.iter()) {
            for (t, &y) in cases.iter().enumerate() {
                b.add_record(&sim.study, &format!("{}:{subject}", sim.study), t as i64 + 1, y, sim.trials, &[], xi)?;
            }
        }
    }
    Ok(b.build()?)
}

/// Pointwise relative bias and RMSE of replicate curve estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveMetrics {
    pub relative_bias: Vec<f64>,
    pub rmse: Vec<f64>,
}

/// `estimates[b][l]` is replication `b`'s estimate of `truth[l]`.
pub fn curve_metrics(estimates: &[Vec<f64>], truth: &[f64]) -> CurveMetrics {
    let n = estimates.len() as f64;
    let mut relative_bias = vec![0.0; truth.len()];
    let mut rmse = vec![0.0; truth.len()];
    for e in estimates {
        for (l, (&v, &t)) in e.iter().zip(truth).enumerate() {
            relative_bias[l] += (v - t) / t / n;
            rmse[l] += (v - t).powi(2) / n;
        }
    }
    rmse.iter_mut().for_each(|v| *v = v.sqrt());
    CurveMetrics { relative_bias, rmse }
}

/// Exposure assigned to simulated subjects when fitting outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureSource {
    True,
    Modeled,
    Observed,
}

/// One outcome fit per replication: which setups are pooled and which
/// exposures are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeFitSpec {
    pub label: String,
    /// Indices into the exposure setups.
    pub setups: Vec<usize>,
    pub source: ExposureSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeStudyConfig {
    pub outcome: OutcomeSimSetup,
    pub fits: Vec<OutcomeFitSpec>,
    pub priors: OutcomePriors,
    pub exposure_priors: ExposurePriors,
    /// Knots of the fitted basis on the log scale, common to all fits.
    pub knots_lower: f64,
    pub knots_upper: f64,
    pub knots_interior: Vec<f64>,
    pub order: usize,
    pub constraint: BetaConstraint,
    /// Log-exposure grid on which curves are scored.
    pub grid: Vec<f64>,
}

impl Default for OutcomeStudyConfig {
    fn default() -> Self {
        let fit = |label: &str, setups: Vec<usize>, source| OutcomeFitSpec { label: label.into(), setups, source };
        Self {
            outcome: OutcomeSimSetup::default(),
            fits: vec![
                fit("combined_modeled", vec![0, 1, 2], ExposureSource::Modeled),
                fit("combined_observed", vec![0, 1, 2], ExposureSource::Observed),
                fit("setup1_modeled", vec![0], ExposureSource::Modeled),
                fit("setup2_modeled", vec![1], ExposureSource::Modeled),
                fit("setup3_modeled", vec![2], ExposureSource::Modeled),
            ],
            priors: OutcomePriors::default(),
            exposure_priors: ExposurePriors::default(),
            knots_lower: 2.0,
            knots_upper: 7.0,
            knots_interior: vec![3.5, 4.0, 4.5, 5.0],
            order: 3,
            constraint: BetaConstraint::Free,
            grid: (0..=60).map(|i| 3.0 + 3.0 * i as f64 / 60.0).collect(),
        }
    }
}

impl OutcomeStudyConfig {
    pub fn erc(&self) -> Result<ErcSpec, FitError> {
        let knots = KnotSet::new(self.knots_lower, self.knots_upper, self.knots_interior.clone())?;
        Ok(ErcSpec::new(knots, self.order, ErcMode::Shared, self.constraint))
    }

    /// The generating curve, intercept included, on the grid.
    pub fn truth(&self) -> Vec<f64> {
        self.grid.iter().map(|&x| self.outcome.curve(x)).collect()
    }
}

/// Per-fit curve estimates of one replication, in the order of the config's
/// fits. Each estimate is the posterior mean of the mean study intercept
/// plus the curve.
pub fn outcome_replication(
    setups: &[ExposureSimSetup],
    config: &OutcomeStudyConfig,
    settings: &SamplerSettings,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>, FitError> {
    let erc = config.erc()?;
    let mut sims = Vec::with_capacity(setups.len());
    for setup in setups {
        let (sim, post, rep) = exposure_replication(setup, &config.exposure_priors, settings, rng)?;
        let subjects: Vec<String> = sim.data.households().iter().map(|h| h.label.clone()).collect();
        let outcome = simulate_outcome(&config.outcome, &setup.name, &subjects, &sim.truths.household, rng);
        let [observed, _, modeled] = rep.estimates;
        drop(post);
        sims.push((outcome, sim.truths.household, modeled.household, observed.household));
    }
    let mut out = Vec::with_capacity(config.fits.len());
    for fit in &config.fits {
        let mut parts = Vec::with_capacity(fit.setups.len());
        for &s in &fit.setups {
            let (o, t, m, ob) =
                sims.get(s).ok_or_else(|| FitError::Input(format!("fit {}: no setup {s}", fit.label)))?;
            let x = match fit.source {
                ExposureSource::True => t,
                ExposureSource::Modeled => m,
                ExposureSource::Observed => ob,
            };
            parts.push((o, x.as_slice()));
        }
        let data = outcome_dataset(&parts)?;
        let post = fit_outcome(data, config.priors.clone(), &erc, &fit_settings(settings, rng))?;
        let draws = curve_draws(&post, &config.grid, CurveAnchor::MeanIntercept, None)?;
        let n = draws.len() as f64;
        let mut mean = vec![0.0; config.grid.len()];
        for d in &draws {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v / n;
            }
        }
        out.push(mean);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeStudyResult {
    pub labels: Vec<String>,
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    /// `estimates[f][b]`: curve of fit `f` in replication `b`.
    pub estimates: Vec<Vec<Vec<f64>>>,
    pub metrics: Vec<CurveMetrics>,
}

/// Runs `n_replications` outcome replications in parallel.
pub fn run_outcome_study(
    setups: &[ExposureSimSetup],
    config: &OutcomeStudyConfig,
    settings: &SamplerSettings,
    n_replications: usize,
    seed: u64,
) -> Result<OutcomeStudyResult, FitError> {
    let reps: Vec<Vec<Vec<f64>>> = (0..n_replications)
        .into_par_iter()
        .map(|b| outcome_replication(setups, config, settings, &mut replication_rng(seed, b)))
        .collect::<Result<_, _>>()?;
    let truth = config.truth();
    let estimates: Vec<Vec<Vec<f64>>> =
        (0..config.fits.len()).map(|f| reps.iter().map(|r| r[f].clone()).collect()).collect();
    let metrics = estimates.iter().map(|e| curve_metrics(e, &truth)).collect();
    Ok(OutcomeStudyResult {
        labels: config.fits.iter().map(|f| f.label.clone()).collect(),
        grid: config.grid.clone(),
        truth,
        estimates,
        metrics,
    })
}

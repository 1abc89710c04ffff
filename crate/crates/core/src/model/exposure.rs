//! Hierarchical model for log pollutant concentrations.
//!
//! ```text
//! w_gkit ~ N(eta_g + alpha_k + alpha_i + f(tau_t)' theta, sigma_W^2)
//! alpha_i ~ N(0, sigma_H^2),  alpha_k ~ N(0, sigma_K^2)
//! eta_g ~ N(eta_0, sigma_G^2), theta ~ N(theta_0, sigma_theta^2 I)
//! ```
//!
//! Random effects are sampled non-centered (`alpha = sigma * z`). The time
//! trend `f` is a centered natural cubic spline in model time.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{normal_lpdf, LogDensityTerms, ParamLayout, ScalePrior, ScaleSlot, HALF_LN_2PI};
use crate::sampler::{DensityError, Model};
use crate::spline::{quantile_knots, NaturalCubicBasis};
use crate::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureObservation {
    pub group: usize,
    pub household: usize,
    pub day: i64,
    pub model_time: f64,
    /// Log concentration.
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Household {
    pub label: String,
    pub cluster: Option<usize>,
}

/// A (group, household) pair: one long-term mean `eta_gki`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HouseholdUnit {
    pub group: usize,
    pub household: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureDataset {
    groups: Vec<String>,
    clusters: Vec<String>,
    households: Vec<Household>,
    observations: Vec<ExposureObservation>,
    units: Vec<HouseholdUnit>,
}

impl ExposureDataset {
    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn clusters(&self) -> &[String] {
        &self.clusters
    }

    pub fn households(&self) -> &[Household] {
        &self.households
    }

    pub fn observations(&self) -> &[ExposureObservation] {
        &self.observations
    }

    /// All (group, household) combinations, observed or declared, sorted.
    pub fn units(&self) -> &[HouseholdUnit] {
        &self.units
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_households(&self) -> usize {
        self.households.len()
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn is_clustered(&self) -> bool {
        !self.clusters.is_empty()
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == label)
    }

    pub fn household_index(&self, label: &str) -> Option<usize> {
        self.households.iter().position(|h| h.label == label)
    }

    pub fn cluster_of(&self, household: usize) -> Option<usize> {
        self.households[household].cluster
    }
}

/// Accumulates labelled records into an [`ExposureDataset`].
#[derive(Debug, Default)]
pub struct ExposureDatasetBuilder {
    groups: Vec<String>,
    group_index: HashMap<String, usize>,
    clusters: Vec<String>,
    cluster_index: HashMap<String, usize>,
    households: Vec<Household>,
    household_index: HashMap<String, usize>,
    observations: Vec<ExposureObservation>,
    units: Vec<HouseholdUnit>,
    clustered: Option<bool>,
}

impl ExposureDatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn intern(labels: &mut Vec<String>, index: &mut HashMap<String, usize>, label: &str) -> usize {
        if let Some(&i) = index.get(label) {
            return i;
        }
        labels.push(label.to_string());
        index.insert(label.to_string(), labels.len() - 1);
        labels.len() - 1
    }

    fn unit(&mut self, group: &str, cluster: Option<&str>, household: &str) -> Result<HouseholdUnit, ModelError> {
        let clustered = cluster.is_some();
        match self.clustered {
            Some(c) if c != clustered => {
                return Err(ModelError::Data(format!(
                    "household {household}: cluster labels must be given for all records or none"
                )))
            }
            _ => self.clustered = Some(clustered),
        }
        let g = Self::intern(&mut self.groups, &mut self.group_index, group);
        let k = cluster.map(|c| Self::intern(&mut self.clusters, &mut self.cluster_index, c));
        let h = match self.household_index.get(household) {
            Some(&h) => {
                if self.households[h].cluster != k {
                    return Err(ModelError::Data(format!(
                        "household {household} appears in more than one cluster"
                    )));
                }
                h
            }
            None => {
                self.households.push(Household { label: household.to_string(), cluster: k });
                self.household_index.insert(household.to_string(), self.households.len() - 1);
                self.households.len() - 1
            }
        };
        Ok(HouseholdUnit { group: g, household: h })
    }

    pub fn add_observation(
        &mut self,
        group: &str,
        cluster: Option<&str>,
        household: &str,
        day: i64,
        model_time: f64,
        w: f64,
    ) -> Result<(), ModelError> {
        if !w.is_finite() {
            return Err(ModelError::Data(format!("household {household}, day {day}: non-finite log value {w}")));
        }
        if !model_time.is_finite() {
            return Err(ModelError::Data(format!("household {household}, day {day}: non-finite model time")));
        }
        let unit = self.unit(group, cluster, household)?;
        self.units.push(unit);
        self.observations.push(ExposureObservation {
            group: unit.group,
            household: unit.household,
            day,
            model_time,
            w,
        });
        Ok(())
    }

    /// Registers a household without observations; its effect keeps its prior.
    pub fn declare_unit(&mut self, group: &str, cluster: Option<&str>, household: &str) -> Result<(), ModelError> {
        let unit = self.unit(group, cluster, household)?;
        self.units.push(unit);
        Ok(())
    }

    pub fn build(mut self) -> Result<ExposureDataset, ModelError> {
        if self.observations.is_empty() {
            return Err(ModelError::Data("exposure dataset has no observations".into()));
        }
        self.units.sort();
        self.units.dedup();
        Ok(ExposureDataset {
            groups: self.groups,
            clusters: self.clusters,
            households: self.households,
            observations: self.observations,
            units: self.units,
        })
    }
}

fn default_sigma() -> ScalePrior {
    ScalePrior::half_normal(0.0, 1.0)
}

fn default_sigma_g() -> ScalePrior {
    ScalePrior::half_normal(0.0, 2.0)
}

fn default_sigma_theta() -> ScalePrior {
    ScalePrior::fixed(5.0)
}

fn default_trend_df() -> usize {
    4
}

/// Priors of the exposure model. `var` entries of half-normal priors are
/// variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposurePriors {
    /// Prior mean of the group means; the mean of all log observations when unset.
    #[serde(default)]
    pub eta0: Option<f64>,
    #[serde(default = "default_sigma_g")]
    pub sigma_g: ScalePrior,
    /// Prior mean of the trend coefficients; zeros when empty, broadcast when length 1.
    #[serde(default)]
    pub theta0: Vec<f64>,
    #[serde(default = "default_sigma_theta")]
    pub sigma_theta: ScalePrior,
    #[serde(default = "default_sigma")]
    pub sigma_w: ScalePrior,
    #[serde(default = "default_sigma")]
    pub sigma_h: ScalePrior,
    #[serde(default = "default_sigma")]
    pub sigma_k: ScalePrior,
    /// Degrees of freedom of the time trend; 0 disables it.
    #[serde(default = "default_trend_df")]
    pub trend_df: usize,
}

impl Default for ExposurePriors {
    fn default() -> Self {
        Self {
            eta0: None,
            sigma_g: default_sigma_g(),
            theta0: Vec::new(),
            sigma_theta: default_sigma_theta(),
            sigma_w: default_sigma(),
            sigma_h: default_sigma(),
            sigma_k: default_sigma(),
            trend_df: default_trend_df(),
        }
    }
}

impl ExposurePriors {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, p) in [
            ("sigma_g", &self.sigma_g),
            ("sigma_theta", &self.sigma_theta),
            ("sigma_w", &self.sigma_w),
            ("sigma_h", &self.sigma_h),
            ("sigma_k", &self.sigma_k),
        ] {
            p.validate(name).map_err(ModelError::Config)?;
        }
        if self.theta0.len() > 1 && self.theta0.len() != self.trend_df {
            return Err(ModelError::Config(format!(
                "theta0 has {} entries but trend_df is {}",
                self.theta0.len(),
                self.trend_df
            )));
        }
        if let Some(e) = self.eta0 {
            if !e.is_finite() {
                return Err(ModelError::Config("eta0 must be finite".into()));
            }
        }
        Ok(())
    }
}

/// All latent quantities of the exposure model on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureParams {
    pub eta: Vec<f64>,
    pub sigma_g: f64,
    pub alpha_cluster: Vec<f64>,
    pub alpha_household: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma_theta: f64,
    pub sigma_w: f64,
    pub sigma_h: f64,
    pub sigma_k: f64,
}

#[derive(Debug, Clone)]
pub struct ExposureModel {
    data: ExposureDataset,
    priors: ExposurePriors,
    eta0: f64,
    theta0: Vec<f64>,
    trend: Option<NaturalCubicBasis>,
    times: Vec<f64>,
    /// Trend basis rows for `times`, row-major `times.len() x df`.
    time_rows: Vec<f64>,
    obs_time: Vec<usize>,
    layout: ParamLayout,
    eta_idx: std::ops::Range<usize>,
    zk_idx: std::ops::Range<usize>,
    zh_idx: std::ops::Range<usize>,
    theta_idx: std::ops::Range<usize>,
    sigma_g: ScaleSlot,
    sigma_k: ScaleSlot,
    sigma_h: ScaleSlot,
    sigma_theta: ScaleSlot,
    sigma_w: ScaleSlot,
}

impl ExposureModel {
    pub fn new(data: ExposureDataset, priors: ExposurePriors) -> Result<Self, ModelError> {
        priors.validate()?;
        let n_obs = data.n_obs() as f64;
        let eta0 = priors.eta0.unwrap_or_else(|| data.observations.iter().map(|o| o.w).sum::<f64>() / n_obs);
        let df = priors.trend_df;

        let mut times: Vec<f64> = data.observations.iter().map(|o| o.model_time).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let trend = if df > 0 {
            if times.len() <= df {
                return Err(ModelError::Config(format!(
                    "trend_df = {df} needs more than {df} distinct model times, found {}",
                    times.len()
                )));
            }
            let obs_times: Vec<f64> = data.observations.iter().map(|o| o.model_time).collect();
            let knots = quantile_knots(&obs_times, df - 1)?;
            if knots.interior().len() + 1 != df {
                return Err(ModelError::Config(format!(
                    "model times too concentrated for trend_df = {df}: only {} distinct interior knots",
                    knots.interior().len()
                )));
            }
            // Centered over the distinct observed model-time indices.
            Some(NaturalCubicBasis::new(&times, df, &knots)?)
        } else {
            None
        };
        let time_rows: Vec<f64> = match &trend {
            Some(b) => times.iter().flat_map(|&t| b.row(t)).collect(),
            None => Vec::new(),
        };
        let obs_time = data
            .observations
            .iter()
            .map(|o| times.binary_search_by(|t| t.total_cmp(&o.model_time)).expect("time present"))
            .collect();

        let theta0 = match priors.theta0.len() {
            0 => vec![0.0; df],
            1 => vec![priors.theta0[0]; df],
            _ => priors.theta0.clone(),
        };

        let mut layout = ParamLayout::default();
        let eta_idx = layout.push("eta", data.n_groups());
        let sigma_g = ScaleSlot::new(&mut layout, "log_sigma_g", priors.sigma_g, true);
        let zk_idx = layout.push("z_cluster", data.n_clusters());
        let sigma_k = ScaleSlot::new(&mut layout, "log_sigma_k", priors.sigma_k, data.is_clustered());
        let zh_idx = layout.push("z_household", data.n_households());
        let sigma_h = ScaleSlot::new(&mut layout, "log_sigma_h", priors.sigma_h, true);
        let theta_idx = layout.push("theta", df);
        let sigma_theta = ScaleSlot::new(&mut layout, "log_sigma_theta", priors.sigma_theta, df > 0);
        let sigma_w = ScaleSlot::new(&mut layout, "log_sigma_w", priors.sigma_w, true);

        Ok(Self {
            data,
            priors,
            eta0,
            theta0,
            trend,
            times,
            time_rows,
            obs_time,
            layout,
            eta_idx,
            zk_idx,
            zh_idx,
            theta_idx,
            sigma_g,
            sigma_k,
            sigma_h,
            sigma_theta,
            sigma_w,
        })
    }

    pub fn data(&self) -> &ExposureDataset {
        &self.data
    }

    pub fn priors(&self) -> &ExposurePriors {
        &self.priors
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn trend_df(&self) -> usize {
        self.priors.trend_df
    }

    pub fn trend_basis(&self) -> Option<&NaturalCubicBasis> {
        self.trend.as_ref()
    }

    /// Trend basis row at model time `tau` (empty when the trend is disabled).
    pub fn trend_row(&self, tau: f64) -> Vec<f64> {
        match &self.trend {
            Some(b) => b.row(tau),
            None => Vec::new(),
        }
    }

    /// Trend value `f(tau)' theta` at each observation.
    pub fn trend_at_obs(&self, theta: &[f64]) -> Vec<f64> {
        let df = self.trend_df();
        let tv: Vec<f64> = (0..self.times.len())
            .map(|t| self.time_rows[t * df..(t + 1) * df].iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect();
        self.obs_time.iter().map(|&t| if df == 0 { 0.0 } else { tv[t] }).collect()
    }

    pub fn params(&self, u: &[f64]) -> ExposureParams {
        let sk = self.sigma_k.value(u);
        let sh = self.sigma_h.value(u);
        ExposureParams {
            eta: u[self.eta_idx.clone()].to_vec(),
            sigma_g: self.sigma_g.value(u),
            alpha_cluster: u[self.zk_idx.clone()].iter().map(|z| sk * z).collect(),
            alpha_household: u[self.zh_idx.clone()].iter().map(|z| sh * z).collect(),
            theta: u[self.theta_idx.clone()].to_vec(),
            sigma_theta: self.sigma_theta.value(u),
            sigma_w: self.sigma_w.value(u),
            sigma_h: sh,
            sigma_k: sk,
        }
    }

    pub fn unconstrain(&self, p: &ExposureParams) -> Result<Vec<f64>, ModelError> {
        use super::transform::positive_unconstrain;
        let mut u = vec![0.0; self.layout.len()];
        u[self.eta_idx.clone()].copy_from_slice(&p.eta);
        for (slot, v) in [
            (&self.sigma_g, p.sigma_g),
            (&self.sigma_k, p.sigma_k),
            (&self.sigma_h, p.sigma_h),
            (&self.sigma_theta, p.sigma_theta),
            (&self.sigma_w, p.sigma_w),
        ] {
            if let Some(i) = slot.index {
                u[i] = positive_unconstrain(v)?;
            }
        }
        for (dst, a) in u[self.zk_idx.clone()].iter_mut().zip(&p.alpha_cluster) {
            *dst = a / p.sigma_k;
        }
        for (dst, a) in u[self.zh_idx.clone()].iter_mut().zip(&p.alpha_household) {
            *dst = a / p.sigma_h;
        }
        u[self.theta_idx.clone()].copy_from_slice(&p.theta);
        Ok(u)
    }

    /// Long-term mean `eta_g + alpha_k + alpha_i` of a household unit.
    pub fn unit_mean(&self, p: &ExposureParams, unit: super::exposure::HouseholdUnit) -> f64 {
        let k = self.data.households[unit.household].cluster;
        p.eta[unit.group] + k.map_or(0.0, |k| p.alpha_cluster[k]) + p.alpha_household[unit.household]
    }

    /// Mean of each observation, trend included.
    pub fn fitted(&self, p: &ExposureParams) -> Vec<f64> {
        let trend = self.trend_at_obs(&p.theta);
        self.data
            .observations
            .iter()
            .zip(trend)
            .map(|(o, t)| {
                let unit = HouseholdUnit { group: o.group, household: o.household };
                self.unit_mean(p, unit) + t
            })
            .collect()
    }

    /// Log posterior split into its parts; the gradient is accumulated into
    /// `grad` when given.
    pub fn terms(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> LogDensityTerms {
        let mut terms = LogDensityTerms::default();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let df = self.trend_df();
        let eta = &u[self.eta_idx.clone()];
        let zk = &u[self.zk_idx.clone()];
        let zh = &u[self.zh_idx.clone()];
        let theta = &u[self.theta_idx.clone()];
        let sg = self.sigma_g.value(u);
        let sk = self.sigma_k.value(u);
        let sh = self.sigma_h.value(u);
        let st = self.sigma_theta.value(u);
        let sw = self.sigma_w.value(u);

        let tv: Vec<f64> = (0..self.times.len())
            .map(|t| {
                if df == 0 {
                    0.0
                } else {
                    self.time_rows[t * df..(t + 1) * df].iter().zip(theta).map(|(a, b)| a * b).sum()
                }
            })
            .collect();

        let mut g_eta = vec![0.0; eta.len()];
        let mut g_k = vec![0.0; zk.len()];
        let mut g_h = vec![0.0; zh.len()];
        let mut g_t = vec![0.0; tv.len()];
        let inv_var = 1.0 / (sw * sw);
        let mut ss = 0.0;
        for (o, &t) in self.data.observations.iter().zip(&self.obs_time) {
            let k = self.data.households[o.household].cluster;
            let mu = eta[o.group] + k.map_or(0.0, |k| sk * zk[k]) + sh * zh[o.household] + tv[t];
            let r = o.w - mu;
            ss += r * r;
            let e = r * inv_var;
            g_eta[o.group] += e;
            if let Some(k) = k {
                g_k[k] += e;
            }
            g_h[o.household] += e;
            g_t[t] += e;
        }
        let n = self.data.n_obs() as f64;
        terms.likelihood = -0.5 * ss * inv_var - n * (sw.ln() + HALF_LN_2PI);
        let grad_sw = -n / sw + ss / (sw * sw * sw);

        // Group means.
        let mut grad_sg = 0.0;
        for (g, &e) in eta.iter().enumerate() {
            terms.prior += normal_lpdf(e, self.eta0, sg);
            let d = e - self.eta0;
            g_eta[g] -= d / (sg * sg);
            grad_sg += -1.0 / sg + d * d / (sg * sg * sg);
        }
        // Standard-normal deviates.
        let mut grad_sk = 0.0;
        for (c, &z) in zk.iter().enumerate() {
            terms.prior += -0.5 * z * z - HALF_LN_2PI;
            grad_sk += z * g_k[c];
            g_k[c] = sk * g_k[c] - z;
        }
        let mut grad_sh = 0.0;
        for (h, &z) in zh.iter().enumerate() {
            terms.prior += -0.5 * z * z - HALF_LN_2PI;
            grad_sh += z * g_h[h];
            g_h[h] = sh * g_h[h] - z;
        }
        // Trend coefficients.
        let mut g_theta = vec![0.0; df];
        let mut grad_st = 0.0;
        for (t, &e) in g_t.iter().enumerate() {
            if e != 0.0 {
                for (gj, &b) in g_theta.iter_mut().zip(&self.time_rows[t * df..(t + 1) * df]) {
                    *gj += e * b;
                }
            }
        }
        for (j, &th) in theta.iter().enumerate() {
            terms.prior += normal_lpdf(th, self.theta0[j], st);
            let d = th - self.theta0[j];
            g_theta[j] -= d / (st * st);
            grad_st += -1.0 / st + d * d / (st * st * st);
        }

        match grad {
            Some(g) => {
                g[self.eta_idx.clone()].copy_from_slice(&g_eta);
                g[self.zk_idx.clone()].copy_from_slice(&g_k);
                g[self.zh_idx.clone()].copy_from_slice(&g_h);
                g[self.theta_idx.clone()].copy_from_slice(&g_theta);
                self.sigma_g.finish(u, sg, grad_sg, &mut terms, Some(&mut *g));
                self.sigma_k.finish(u, sk, grad_sk, &mut terms, Some(&mut *g));
                self.sigma_h.finish(u, sh, grad_sh, &mut terms, Some(&mut *g));
                self.sigma_theta.finish(u, st, grad_st, &mut terms, Some(&mut *g));
                self.sigma_w.finish(u, sw, grad_sw, &mut terms, Some(g));
            }
            None => {
                self.sigma_g.finish(u, sg, grad_sg, &mut terms, None);
                self.sigma_k.finish(u, sk, grad_sk, &mut terms, None);
                self.sigma_h.finish(u, sh, grad_sh, &mut terms, None);
                self.sigma_theta.finish(u, st, grad_st, &mut terms, None);
                self.sigma_w.finish(u, sw, grad_sw, &mut terms, None);
            }
        }
        terms
    }

    /// Names of the constrained parameter vector produced by [`Model::constrain`].
    pub fn constrained_names(&self) -> Vec<String> {
        let d = &self.data;
        let mut names: Vec<String> = d.groups.iter().map(|g| format!("eta[{g}]")).collect();
        names.push("sigma_G".into());
        names.extend(d.clusters.iter().map(|k| format!("alpha_cluster[{k}]")));
        names.extend(d.households.iter().map(|h| format!("alpha_household[{}]", h.label)));
        names.extend((0..self.trend_df()).map(|j| format!("theta[{}]", j + 1)));
        names.push("sigma_theta".into());
        names.push("sigma_W".into());
        names.push("sigma_H".into());
        if d.is_clustered() {
            names.push("sigma_K".into());
        }
        names
    }

    pub fn flatten(&self, p: &ExposureParams) -> Vec<f64> {
        let mut v = p.eta.clone();
        v.push(p.sigma_g);
        v.extend(&p.alpha_cluster);
        v.extend(&p.alpha_household);
        v.extend(&p.theta);
        v.push(p.sigma_theta);
        v.push(p.sigma_w);
        v.push(p.sigma_h);
        if self.data.is_clustered() {
            v.push(p.sigma_k);
        }
        v
    }

    /// Inverse of [`ExposureModel::flatten`].
    pub fn unflatten(&self, v: &[f64]) -> ExposureParams {
        let d = &self.data;
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let eta = take(d.n_groups());
        let sigma_g = take(1)[0];
        let alpha_cluster = take(d.n_clusters());
        let alpha_household = take(d.n_households());
        let theta = take(self.trend_df());
        let sigma_theta = take(1)[0];
        let sigma_w = take(1)[0];
        let sigma_h = take(1)[0];
        let sigma_k = if d.is_clustered() { take(1)[0] } else { self.sigma_k.value(&[]) };
        ExposureParams { eta, sigma_g, alpha_cluster, alpha_household, theta, sigma_theta, sigma_w, sigma_h, sigma_k }
    }
}

impl Model for ExposureModel {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn log_density(&self, position: &[f64], grad: &mut [f64]) -> Result<f64, DensityError> {
        let lp = self.terms(position, Some(grad)).total();
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            Ok(lp)
        } else {
            Err(DensityError::NonFinite)
        }
    }

    fn initial_point(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.dim()];
        let mut sums = vec![(0.0, 0usize); self.data.n_groups()];
        let mut total = 0.0;
        for o in &self.data.observations {
            sums[o.group].0 += o.w;
            sums[o.group].1 += 1;
            total += o.w;
        }
        let mean = total / self.data.n_obs() as f64;
        for (g, (s, n)) in sums.iter().enumerate() {
            u[self.eta_idx.start + g] = if *n > 0 { s / *n as f64 } else { self.eta0 };
        }
        if let Some(i) = self.sigma_w.index {
            let var = self.data.observations.iter().map(|o| (o.w - mean).powi(2)).sum::<f64>()
                / self.data.n_obs() as f64;
            u[i] = 0.5 * var.max(1e-4).ln();
        }
        for slot in [&self.sigma_h, &self.sigma_k] {
            if let Some(i) = slot.index {
                u[i] = -1.0;
            }
        }
        u
    }

    fn param_names(&self) -> Vec<String> {
        self.constrained_names()
    }

    fn constrain(&self, position: &[f64]) -> Vec<f64> {
        self.flatten(&self.params(position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single_obs(w: f64) -> ExposureModel {
        let mut b = ExposureDatasetBuilder::new();
        b.add_observation("g", None, "h1", 1, 1.0, w).unwrap();
        let priors = ExposurePriors {
            trend_df: 0,
            sigma_w: ScalePrior::fixed(0.7),
            ..Default::default()
        };
        ExposureModel::new(b.build().unwrap(), priors).unwrap()
    }

    #[test]
    fn zero_residual_data_term() {
        let m = single_obs(4.2);
        let mut u = vec![0.0; m.dim()];
        u[m.eta_idx.start] = 4.2;
        let terms = m.terms(&u, None);
        let expected = -(0.7f64 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_abs_diff_eq!(terms.likelihood, expected, epsilon = 1e-14);
    }

    #[test]
    fn builder_rejects_mixed_clustering() {
        let mut b = ExposureDatasetBuilder::new();
        b.add_observation("g", Some("k"), "h1", 1, 1.0, 1.0).unwrap();
        assert!(b.add_observation("g", None, "h2", 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn builder_rejects_household_in_two_clusters() {
        let mut b = ExposureDatasetBuilder::new();
        b.add_observation("g", Some("k1"), "h1", 1, 1.0, 1.0).unwrap();
        assert!(b.add_observation("g", Some("k2"), "h1", 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn builder_rejects_non_finite() {
        let mut b = ExposureDatasetBuilder::new();
        assert!(b.add_observation("g", None, "h1", 1, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn declared_unit_is_kept() {
        let mut b = ExposureDatasetBuilder::new();
        b.add_observation("g", None, "h1", 1, 1.0, 1.0).unwrap();
        b.declare_unit("g", None, "h2").unwrap();
        let d = b.build().unwrap();
        assert_eq!(d.n_households(), 2);
        assert_eq!(d.units().len(), 2);
    }

    #[test]
    fn trend_needs_enough_times() {
        let mut b = ExposureDatasetBuilder::new();
        b.add_observation("g", None, "h1", 1, 1.0, 1.0).unwrap();
        b.add_observation("g", None, "h1", 2, 2.0, 1.0).unwrap();
        let err = ExposureModel::new(b.build().unwrap(), ExposurePriors::default()).unwrap_err();
        assert!(matches!(err, ModelError::Config(_)));
    }
}

//! Pooled mixed-effects logistic model for binomial counts.
//!
//! ```text
//! logit(mu_it) = psi_s + xi_i + z_i' gamma + h_s(t)' delta_s + g(x_it)' beta_s
//! Y_it ~ Binomial(T_it, mu_it)
//! ```
//!
//! `h_s` is a per-study centered natural cubic basis in period and `g` is an
//! I-spline basis in log exposure. The exposure-response coefficients are
//! either shared across studies or drawn per study around a common mean with
//! an LKJ prior on the between-study correlation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use super::lkj::lkj_cholesky_log_density;
use super::transform::{
    corr_cholesky_backprop, corr_cholesky_constrain, corr_cholesky_unconstrain, corr_free_len, positive_unconstrain,
    CorrCholesky,
};
use super::{normal_lpdf, LogDensityTerms, ParamLayout, ScalePrior, ScaleSlot, HALF_LN_2PI};
use crate::sampler::{DensityError, Model};
use crate::spline::{quantile_knots, ISplineBasis, NaturalCubicBasis};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErcMode {
    #[default]
    Shared,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaConstraint {
    #[default]
    Free,
    NonNegative,
}

/// Whether the hierarchical mean of the study coefficients is one number or
/// one per basis function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Beta0Mode {
    #[default]
    Scalar,
    PerBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRecord {
    pub study: usize,
    pub subject: usize,
    pub period: i64,
    pub cases: u64,
    pub trials: u64,
    pub covariates: Vec<f64>,
    /// Assigned log exposure.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub label: String,
    pub study: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDataset {
    studies: Vec<String>,
    subjects: Vec<Subject>,
    covariate_names: Vec<String>,
    records: Vec<OutcomeRecord>,
}

impl OutcomeDataset {
    pub fn studies(&self) -> &[String] {
        &self.studies
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn records(&self) -> &[OutcomeRecord] {
        &self.records
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }
}

#[derive(Debug, Default)]
pub struct OutcomeDatasetBuilder {
    studies: Vec<String>,
    study_index: HashMap<String, usize>,
    subjects: Vec<Subject>,
    subject_index: HashMap<String, usize>,
    covariate_names: Vec<String>,
    records: Vec<OutcomeRecord>,
}

impl OutcomeDatasetBuilder {
    pub fn new(covariate_names: Vec<String>) -> Self {
        Self { covariate_names, ..Default::default() }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn add_record(
        &mut self,
        study: &str,
        subject: &str,
        period: i64,
        cases: u64,
        trials: u64,
        covariates: &[f64],
        x: f64,
    ) -> Result<(), ModelError> {
        let at = || format!("subject {subject}, period {period}");
        if trials == 0 {
            return Err(ModelError::Data(format!("{}: trials must be positive", at())));
        }
        if cases > trials {
            return Err(ModelError::Data(format!("{}: cases {cases} exceed trials {trials}", at())));
        }
        if !x.is_finite() {
            return Err(ModelError::Data(format!("{}: exposure is not finite", at())));
        }
        if covariates.len() != self.covariate_names.len() {
            return Err(ModelError::Data(format!(
                "{}: expected {} covariates, got {}",
                at(),
                self.covariate_names.len(),
                covariates.len()
            )));
        }
        if covariates.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::Data(format!("{}: non-finite covariate", at())));
        }
        let s = match self.study_index.get(study) {
            Some(&s) => s,
            None => {
                self.studies.push(study.to_string());
                self.study_index.insert(study.to_string(), self.studies.len() - 1);
                self.studies.len() - 1
            }
        };
        let i = match self.subject_index.get(subject) {
            Some(&i) => {
                if self.subjects[i].study != s {
                    return Err(ModelError::Data(format!("subject {subject} appears in more than one study")));
                }
                i
            }
            None => {
                self.subjects.push(Subject { label: subject.to_string(), study: s });
                self.subject_index.insert(subject.to_string(), self.subjects.len() - 1);
                self.subjects.len() - 1
            }
        };
        self.records.push(OutcomeRecord {
            study: s,
            subject: i,
            period,
            cases,
            trials,
            covariates: covariates.to_vec(),
            x,
        });
        Ok(())
    }

    pub fn build(self) -> Result<OutcomeDataset, ModelError> {
        if self.records.is_empty() {
            return Err(ModelError::Data("outcome dataset has no records".into()));
        }
        Ok(OutcomeDataset {
            studies: self.studies,
            subjects: self.subjects,
            covariate_names: self.covariate_names,
            records: self.records,
        })
    }
}

fn default_sigma() -> ScalePrior {
    ScalePrior::half_normal(0.0, 1.0)
}

fn default_sigma_psi() -> ScalePrior {
    ScalePrior::half_normal(0.0, 25.0)
}

fn default_time_df() -> usize {
    8
}

fn default_lkj() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomePriors {
    #[serde(default = "default_sigma_psi")]
    pub sigma_psi: ScalePrior,
    #[serde(default = "default_sigma")]
    pub sigma_xi: ScalePrior,
    #[serde(default = "default_sigma")]
    pub sigma_gamma: ScalePrior,
    #[serde(default = "default_sigma")]
    pub sigma_delta: ScalePrior,
    #[serde(default = "default_sigma")]
    pub sigma_b: ScalePrior,
    /// Default degrees of freedom of each study's time basis.
    #[serde(default = "default_time_df")]
    pub time_df: usize,
    /// Per-study overrides of `time_df`, keyed by study label.
    #[serde(default)]
    pub study_time_df: BTreeMap<String, usize>,
    #[serde(default)]
    pub beta0: Beta0Mode,
    /// Fixed between-study scale per study; ones when empty.
    #[serde(default)]
    pub xi0: Vec<f64>,
    #[serde(default = "default_lkj")]
    pub lkj_eta: f64,
}

impl Default for OutcomePriors {
    fn default() -> Self {
        Self {
            sigma_psi: default_sigma_psi(),
            sigma_xi: default_sigma(),
            sigma_gamma: default_sigma(),
            sigma_delta: default_sigma(),
            sigma_b: default_sigma(),
            time_df: default_time_df(),
            study_time_df: BTreeMap::new(),
            beta0: Beta0Mode::Scalar,
            xi0: Vec::new(),
            lkj_eta: default_lkj(),
        }
    }
}

impl OutcomePriors {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, p) in [
            ("sigma_psi", &self.sigma_psi),
            ("sigma_xi", &self.sigma_xi),
            ("sigma_gamma", &self.sigma_gamma),
            ("sigma_delta", &self.sigma_delta),
            ("sigma_b", &self.sigma_b),
        ] {
            p.validate(name).map_err(ModelError::Config)?;
        }
        if !(self.lkj_eta > 0.0 && self.lkj_eta.is_finite()) {
            return Err(ModelError::Config(format!("lkj_eta must be positive, got {}", self.lkj_eta)));
        }
        if self.xi0.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(ModelError::Config("xi0 entries must be positive".into()));
        }
        Ok(())
    }
}

/// Latent quantities of the outcome model on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeParams {
    pub psi: Vec<f64>,
    pub sigma_psi: f64,
    pub xi: Vec<f64>,
    pub sigma_xi: f64,
    pub gamma: Vec<f64>,
    pub sigma_gamma: f64,
    /// Time coefficients per study.
    pub delta: Vec<Vec<f64>>,
    pub sigma_delta: f64,
    /// One row when shared, one row per study when hierarchical.
    pub beta: Vec<Vec<f64>>,
    /// Hierarchical mean; empty when shared.
    pub beta0: Vec<f64>,
    /// Between-study correlation factor; `None` when shared.
    pub corr: Option<CorrCholesky>,
    pub sigma_b: f64,
}

#[derive(Debug, Clone)]
struct StudyTime {
    df: usize,
    periods: Vec<i64>,
    /// `periods.len() x df`, row-major.
    rows: Vec<f64>,
    /// Offset of this study's coefficients among all time coefficients.
    offset: usize,
}

/// A record reduced to indices into shared tables.
#[derive(Debug, Clone, Copy)]
struct Cell {
    subject: usize,
    study: usize,
    time: usize,
    erc: usize,
    cases: f64,
    trials: f64,
}

type Range = std::ops::Range<usize>;

#[derive(Debug, Clone)]
pub struct OutcomeModel {
    data: OutcomeDataset,
    priors: OutcomePriors,
    basis: ISplineBasis,
    mode: ErcMode,
    constraint: BetaConstraint,
    n_basis: usize,
    /// Mean ERC basis row of each study's records, `n_studies x n_basis`.
    /// The sampled intercept of study `s` is `psi_s + erc_means[s]' beta_s`,
    /// which decorrelates it from the coefficients.
    erc_means: Vec<f64>,
    xi0: Vec<f64>,
    times: Vec<StudyTime>,
    /// Distinct (study, exposure) pairs and their basis rows.
    erc_cells: Vec<(usize, f64)>,
    erc_rows: Vec<f64>,
    cells: Vec<Cell>,
    log_binom_const: f64,
    layout: ParamLayout,
    psi_idx: Range,
    zxi_idx: Range,
    gamma_idx: Range,
    delta_idx: Range,
    beta_idx: Range,
    beta0_idx: Range,
    corr_idx: Range,
    sigma_psi: ScaleSlot,
    sigma_xi: ScaleSlot,
    sigma_gamma: ScaleSlot,
    sigma_delta: ScaleSlot,
    sigma_b: ScaleSlot,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x)` and `sigmoid(x)` sharing one exponential.
#[inline]
fn softplus_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sg = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sg)
}

/// Builds a centered natural cubic time basis for one study, lowering the
/// degrees of freedom when there are too few distinct periods.
fn study_time_basis(study: &str, periods: &[i64], requested: usize) -> Result<(usize, Vec<f64>), ModelError> {
    let mut distinct: Vec<i64> = periods.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let grid: Vec<f64> = distinct.iter().map(|&p| p as f64).collect();
    let mut df = requested.min(distinct.len().saturating_sub(1));
    if df < requested {
        log::warn!(
            "study {study}: time basis reduced from {requested} to {df} degrees of freedom ({} distinct periods)",
            distinct.len()
        );
    }
    let all: Vec<f64> = periods.iter().map(|&p| p as f64).collect();
    while df > 0 {
        let knots = quantile_knots(&all, df - 1)?;
        if knots.interior().len() + 1 == df {
            let basis = NaturalCubicBasis::new(&grid, df, &knots)?;
            return Ok((df, grid.iter().flat_map(|&t| basis.row(t)).collect()));
        }
        log::warn!("study {study}: duplicate time knots, reducing time basis to {} degrees of freedom", df - 1);
        df -= 1;
    }
    Ok((0, Vec::new()))
}

impl OutcomeModel {
    pub fn new(
        data: OutcomeDataset,
        priors: OutcomePriors,
        basis: ISplineBasis,
        mode: ErcMode,
        constraint: BetaConstraint,
    ) -> Result<Self, ModelError> {
        priors.validate()?;
        let n_studies = data.n_studies();
        let n_basis = basis.n_basis();
        let xi0 = match priors.xi0.len() {
            0 => vec![1.0; n_studies],
            1 => vec![priors.xi0[0]; n_studies],
            n if n == n_studies => priors.xi0.clone(),
            n => {
                return Err(ModelError::Config(format!("xi0 has {n} entries but there are {n_studies} studies")))
            }
        };

        let mut times = Vec::with_capacity(n_studies);
        let mut offset = 0;
        for (s, label) in data.studies.iter().enumerate() {
            let periods: Vec<i64> = data.records.iter().filter(|r| r.study == s).map(|r| r.period).collect();
            let requested = priors.study_time_df.get(label).copied().unwrap_or(priors.time_df);
            let (df, rows) = study_time_basis(label, &periods, requested)?;
            let mut distinct = periods;
            distinct.sort_unstable();
            distinct.dedup();
            times.push(StudyTime { df, periods: distinct, rows, offset });
            offset += df;
        }
        let n_time = offset;

        let mut erc_lookup: HashMap<(usize, u64), usize> = HashMap::new();
        let mut erc_cells = Vec::new();
        let mut erc_rows = Vec::new();
        let mut cells = Vec::with_capacity(data.n_records());
        let mut log_binom_const = 0.0;
        for r in &data.records {
            let study = if mode == ErcMode::Hierarchical { r.study } else { 0 };
            let erc = *erc_lookup.entry((study, r.x.to_bits())).or_insert_with(|| {
                erc_cells.push((study, r.x));
                erc_rows.extend(basis.row(r.x));
                erc_cells.len() - 1
            });
            let time = times[r.study].periods.binary_search(&r.period).expect("period present");
            cells.push(Cell {
                subject: r.subject,
                study: r.study,
                time,
                erc,
                cases: r.cases as f64,
                trials: r.trials as f64,
            });
            log_binom_const += ln_binomial(r.trials, r.cases);
        }

        let mut erc_means = vec![0.0; n_studies * n_basis];
        let mut per_study = vec![0usize; n_studies];
        for (r, c) in data.records.iter().zip(&cells) {
            per_study[r.study] += 1;
            let row = &erc_rows[c.erc * n_basis..(c.erc + 1) * n_basis];
            for (m, v) in erc_means[r.study * n_basis..(r.study + 1) * n_basis].iter_mut().zip(row) {
                *m += v;
            }
        }
        for (s, &n) in per_study.iter().enumerate() {
            erc_means[s * n_basis..(s + 1) * n_basis].iter_mut().for_each(|m| *m /= n.max(1) as f64);
        }

        let n_cov = data.n_covariates();
        let hier = mode == ErcMode::Hierarchical;
        let mut layout = ParamLayout::default();
        let psi_idx = layout.push("psi", n_studies);
        let sigma_psi = ScaleSlot::new(&mut layout, "log_sigma_psi", priors.sigma_psi, true);
        let zxi_idx = layout.push("z_xi", data.n_subjects());
        let sigma_xi = ScaleSlot::new(&mut layout, "log_sigma_xi", priors.sigma_xi, true);
        let gamma_idx = layout.push("gamma", n_cov);
        let sigma_gamma = ScaleSlot::new(&mut layout, "log_sigma_gamma", priors.sigma_gamma, n_cov > 0);
        let delta_idx = layout.push("z_delta", n_time);
        let sigma_delta = ScaleSlot::new(&mut layout, "log_sigma_delta", priors.sigma_delta, n_time > 0);
        let beta_name = match (mode, constraint) {
            (ErcMode::Hierarchical, BetaConstraint::Free) => "z_beta",
            (_, BetaConstraint::NonNegative) => "log_beta",
            _ => "beta",
        };
        let beta_idx = layout.push(beta_name, if hier { n_studies * n_basis } else { n_basis });
        let n_beta0 = match (hier, priors.beta0) {
            (false, _) => 0,
            (true, Beta0Mode::Scalar) => 1,
            (true, Beta0Mode::PerBasis) => n_basis,
        };
        let beta0_idx = layout.push("beta0", n_beta0);
        let corr_idx = layout.push("corr", if hier { corr_free_len(n_studies) } else { 0 });
        let sigma_b = ScaleSlot::new(&mut layout, "log_sigma_b", priors.sigma_b, n_basis > 0);

        Ok(Self {
            data,
            priors,
            basis,
            mode,
            constraint,
            n_basis,
            erc_means,
            xi0,
            times,
            erc_cells,
            erc_rows,
            cells,
            log_binom_const,
            layout,
            psi_idx,
            zxi_idx,
            gamma_idx,
            delta_idx,
            beta_idx,
            beta0_idx,
            corr_idx,
            sigma_psi,
            sigma_xi,
            sigma_gamma,
            sigma_delta,
            sigma_b,
        })
    }

    pub fn data(&self) -> &OutcomeDataset {
        &self.data
    }

    pub fn priors(&self) -> &OutcomePriors {
        &self.priors
    }

    pub fn basis(&self) -> &ISplineBasis {
        &self.basis
    }

    pub fn mode(&self) -> ErcMode {
        self.mode
    }

    pub fn constraint(&self) -> BetaConstraint {
        self.constraint
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// Degrees of freedom actually used for each study's time basis.
    pub fn time_df(&self) -> Vec<usize> {
        self.times.iter().map(|t| t.df).collect()
    }

    fn n_beta_rows(&self) -> usize {
        match self.mode {
            ErcMode::Shared => 1,
            ErcMode::Hierarchical => self.data.n_studies(),
        }
    }

    /// `erc_means[s]' beta_s` for every study.
    fn erc_shift(&self, beta: &[f64]) -> Vec<f64> {
        let j_n = self.n_basis;
        let shared = self.mode == ErcMode::Shared;
        (0..self.data.n_studies())
            .map(|s| {
                let b = if shared { &beta[..j_n] } else { &beta[s * j_n..(s + 1) * j_n] };
                self.erc_means[s * j_n..(s + 1) * j_n].iter().zip(b).map(|(m, b)| m * b).sum()
            })
            .collect()
    }

    /// ERC basis columns that take a single value within every study; their
    /// coefficients are not identified from the exposure contrast.
    pub fn constant_erc_columns(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for j in 0..self.n_basis {
            let mut ranges: Vec<Option<(f64, f64)>> = vec![None; self.data.n_studies()];
            for r in &self.data.records {
                let v = self.basis.row(r.x)[j];
                let e = ranges[r.study].get_or_insert((v, v));
                e.0 = e.0.min(v);
                e.1 = e.1.max(v);
            }
            if ranges.iter().flatten().all(|(lo, hi)| hi - lo < 1e-12) {
                out.push(j);
            }
        }
        out
    }

    fn correlation(&self, u: &[f64]) -> (CorrCholesky, f64) {
        corr_cholesky_constrain(&u[self.corr_idx.clone()], self.data.n_studies())
    }

    /// beta rows from the unconstrained vector.
    fn beta_rows(&self, u: &[f64], corr: Option<&CorrCholesky>, sigma_b: f64) -> Vec<f64> {
        let raw = &u[self.beta_idx.clone()];
        let j_n = self.n_basis;
        match (self.mode, self.constraint) {
            (_, BetaConstraint::NonNegative) => raw.iter().map(|v| v.exp()).collect(),
            (ErcMode::Shared, BetaConstraint::Free) => raw.to_vec(),
            (ErcMode::Hierarchical, BetaConstraint::Free) => {
                let l = corr.expect("hierarchical factor");
                let s_n = self.data.n_studies();
                let b0 = &u[self.beta0_idx.clone()];
                let mut out = vec![0.0; s_n * j_n];
                for s in 0..s_n {
                    for j in 0..j_n {
                        let lz: f64 = (0..=s).map(|m| l.get(s, m) * raw[m * j_n + j]).sum();
                        let mean = if b0.len() == 1 { b0[0] } else { b0[j] };
                        out[s * j_n + j] = mean + sigma_b * self.xi0[s] * lz;
                    }
                }
                out
            }
        }
    }

    pub fn params(&self, u: &[f64]) -> OutcomeParams {
        let sxi = self.sigma_xi.value(u);
        let sd = self.sigma_delta.value(u);
        let sb = self.sigma_b.value(u);
        let corr = (self.mode == ErcMode::Hierarchical).then(|| self.correlation(u).0);
        let beta = self.beta_rows(u, corr.as_ref(), sb);
        let d = &u[self.delta_idx.clone()];
        let shift = self.erc_shift(&beta);
        OutcomeParams {
            psi: u[self.psi_idx.clone()].iter().zip(&shift).map(|(p, c)| p - c).collect(),
            sigma_psi: self.sigma_psi.value(u),
            xi: u[self.zxi_idx.clone()].iter().map(|z| sxi * z).collect(),
            sigma_xi: sxi,
            gamma: u[self.gamma_idx.clone()].to_vec(),
            sigma_gamma: self.sigma_gamma.value(u),
            delta: self.times.iter().map(|t| d[t.offset..t.offset + t.df].iter().map(|z| sd * z).collect()).collect(),
            sigma_delta: sd,
            beta: beta.chunks(self.n_basis.max(1)).take(self.n_beta_rows()).map(|c| c.to_vec()).collect(),
            beta0: u[self.beta0_idx.clone()].to_vec(),
            corr,
            sigma_b: sb,
        }
    }

    pub fn unconstrain(&self, p: &OutcomeParams) -> Result<Vec<f64>, ModelError> {
        let mut u = vec![0.0; self.layout.len()];
        let flat: Vec<f64> = p.beta.iter().flatten().copied().collect();
        let shift = self.erc_shift(&flat);
        for ((dst, v), c) in u[self.psi_idx.clone()].iter_mut().zip(&p.psi).zip(&shift) {
            *dst = v + c;
        }
        for (slot, v) in [
            (&self.sigma_psi, p.sigma_psi),
            (&self.sigma_xi, p.sigma_xi),
            (&self.sigma_gamma, p.sigma_gamma),
            (&self.sigma_delta, p.sigma_delta),
            (&self.sigma_b, p.sigma_b),
        ] {
            if let Some(i) = slot.index {
                u[i] = positive_unconstrain(v)?;
            }
        }
        for (dst, x) in u[self.zxi_idx.clone()].iter_mut().zip(&p.xi) {
            *dst = x / p.sigma_xi;
        }
        u[self.gamma_idx.clone()].copy_from_slice(&p.gamma);
        for (t, dl) in self.times.iter().zip(&p.delta) {
            for (k, v) in dl.iter().enumerate() {
                u[self.delta_idx.start + t.offset + k] = v / p.sigma_delta;
            }
        }
        let j_n = self.n_basis;
        match (self.mode, self.constraint) {
            (_, BetaConstraint::NonNegative) => {
                for (dst, b) in u[self.beta_idx.clone()].iter_mut().zip(&flat) {
                    *dst = positive_unconstrain(*b)?;
                }
            }
            (ErcMode::Shared, BetaConstraint::Free) => u[self.beta_idx.clone()].copy_from_slice(&flat),
            (ErcMode::Hierarchical, BetaConstraint::Free) => {
                let l = p.corr.as_ref().ok_or_else(|| ModelError::Config("missing correlation factor".into()))?;
                let s_n = self.data.n_studies();
                for j in 0..j_n {
                    let mean = |j: usize| if p.beta0.len() == 1 { p.beta0[0] } else { p.beta0[j] };
                    // Forward substitution for L z = (beta - beta0) / (sigma_B xi0).
                    let mut z = vec![0.0; s_n];
                    for s in 0..s_n {
                        let y = (flat[s * j_n + j] - mean(j)) / (p.sigma_b * self.xi0[s]);
                        let acc: f64 = (0..s).map(|m| l.get(s, m) * z[m]).sum();
                        z[s] = (y - acc) / l.get(s, s);
                    }
                    for s in 0..s_n {
                        u[self.beta_idx.start + s * j_n + j] = z[s];
                    }
                }
            }
        }
        u[self.beta0_idx.clone()].copy_from_slice(&p.beta0);
        if let Some(l) = &p.corr {
            u[self.corr_idx.clone()].copy_from_slice(&corr_cholesky_unconstrain(l)?);
        }
        Ok(u)
    }

    /// Log posterior split into its parts, with optional gradient.
    pub fn terms(&self, u: &[f64], grad: Option<&mut [f64]>) -> LogDensityTerms {
        let mut terms = LogDensityTerms::default();
        let s_n = self.data.n_studies();
        let j_n = self.n_basis;
        let hier = self.mode == ErcMode::Hierarchical;

        let zxi = &u[self.zxi_idx.clone()];
        let gamma = &u[self.gamma_idx.clone()];
        let zd = &u[self.delta_idx.clone()];
        let s_psi = self.sigma_psi.value(u);
        let s_xi = self.sigma_xi.value(u);
        let s_gamma = self.sigma_gamma.value(u);
        let s_delta = self.sigma_delta.value(u);
        let s_b = self.sigma_b.value(u);
        let (corr, corr_logj) = if hier { Some(self.correlation(u)).unzip() } else { (None, None) };
        let beta = self.beta_rows(u, corr.as_ref(), s_b);
        let shift = self.erc_shift(&beta);
        let psi: Vec<f64> = u[self.psi_idx.clone()].iter().zip(&shift).map(|(p, c)| p - c).collect();
        let psi = psi.as_slice();

        // Per-study time values and per-cell ERC values.
        let tv: Vec<Vec<f64>> = self
            .times
            .iter()
            .map(|t| {
                let d = &zd[t.offset..t.offset + t.df];
                (0..t.periods.len())
                    .map(|p| s_delta * t.rows[p * t.df..(p + 1) * t.df].iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            })
            .collect();
        let ev: Vec<f64> = self
            .erc_cells
            .iter()
            .enumerate()
            .map(|(c, &(s, _))| {
                let row = &self.erc_rows[c * j_n..(c + 1) * j_n];
                row.iter().zip(&beta[s * j_n..(s + 1) * j_n]).map(|(a, b)| a * b).sum()
            })
            .collect();
        let cov_term: Vec<f64> = if gamma.is_empty() {
            Vec::new()
        } else {
            self.data.records.iter().map(|r| r.covariates.iter().zip(gamma).map(|(a, b)| a * b).sum()).collect()
        };

        let want_grad = grad.is_some();
        let mut g_psi = vec![0.0; s_n];
        let mut g_xi = vec![0.0; zxi.len()];
        let mut g_gamma = vec![0.0; gamma.len()];
        let mut g_tv: Vec<Vec<f64>> = tv.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut g_ev = vec![0.0; ev.len()];
        let mut ll = self.log_binom_const;
        for (r, c) in self.cells.iter().enumerate() {
            let mut eta = psi[c.study] + s_xi * zxi[c.subject] + tv[c.study][c.time] + ev[c.erc];
            if !cov_term.is_empty() {
                eta += cov_term[r];
            }
            if !want_grad {
                ll += c.cases * eta - c.trials * softplus(eta);
                continue;
            }
            let (sp, sg) = softplus_sigmoid(eta);
            ll += c.cases * eta - c.trials * sp;
            {
                let e = c.cases - c.trials * sg;
                g_psi[c.study] += e;
                g_xi[c.subject] += e;
                g_tv[c.study][c.time] += e;
                g_ev[c.erc] += e;
                if !gamma.is_empty() {
                    for (g, z) in g_gamma.iter_mut().zip(&self.data.records[r].covariates) {
                        *g += e * z;
                    }
                }
            }
        }
        terms.likelihood = ll;

        // Study intercepts.
        let mut grad_spsi = 0.0;
        for (s, &p) in psi.iter().enumerate() {
            terms.prior += normal_lpdf(p, 0.0, s_psi);
            g_psi[s] -= p / (s_psi * s_psi);
            grad_spsi += -1.0 / s_psi + p * p / (s_psi * s_psi * s_psi);
        }
        // Subject effects.
        let mut grad_sxi = 0.0;
        for (i, &z) in zxi.iter().enumerate() {
            terms.prior += -0.5 * z * z - HALF_LN_2PI;
            grad_sxi += g_xi[i] * z;
            g_xi[i] = g_xi[i] * s_xi - z;
        }
        // Covariates.
        let mut grad_sgamma = 0.0;
        for (k, &c) in gamma.iter().enumerate() {
            terms.prior += normal_lpdf(c, 0.0, s_gamma);
            g_gamma[k] -= c / (s_gamma * s_gamma);
            grad_sgamma += -1.0 / s_gamma + c * c / (s_gamma * s_gamma * s_gamma);
        }
        // Time coefficients.
        let mut g_zd = vec![0.0; zd.len()];
        let mut grad_sdelta = 0.0;
        for (t, gt) in self.times.iter().zip(&g_tv) {
            for (p, &e) in gt.iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                let row = &t.rows[p * t.df..(p + 1) * t.df];
                for k in 0..t.df {
                    g_zd[t.offset + k] += e * s_delta * row[k];
                    grad_sdelta += e * row[k] * zd[t.offset + k];
                }
            }
        }
        for (k, &z) in zd.iter().enumerate() {
            terms.prior += -0.5 * z * z - HALF_LN_2PI;
            g_zd[k] -= z;
        }

        // Exposure-response coefficients: likelihood gradient wrt beta.
        let mut g_beta = vec![0.0; beta.len()];
        for (c, &(s, _)) in self.erc_cells.iter().enumerate() {
            let e = g_ev[c];
            if e != 0.0 {
                let row = &self.erc_rows[c * j_n..(c + 1) * j_n];
                for j in 0..j_n {
                    g_beta[s * j_n + j] += e * row[j];
                }
            }
        }
        // Through the intercept shift.
        for (s, &gp) in g_psi.iter().enumerate() {
            let b = if hier { s } else { 0 };
            for j in 0..j_n {
                g_beta[b * j_n + j] -= self.erc_means[s * j_n + j] * gp;
            }
        }
        let raw = &u[self.beta_idx.clone()];
        let b0 = &u[self.beta0_idx.clone()];
        let mut g_raw = vec![0.0; raw.len()];
        let mut g_b0 = vec![0.0; b0.len()];
        let mut g_corr = vec![0.0; self.corr_idx.len()];
        let mut grad_sb = 0.0;
        let ln2 = std::f64::consts::LN_2;
        match (self.mode, self.constraint) {
            (ErcMode::Shared, BetaConstraint::Free) => {
                for (j, &b) in beta.iter().enumerate() {
                    terms.prior += normal_lpdf(b, 0.0, s_b);
                    g_raw[j] = g_beta[j] - b / (s_b * s_b);
                    grad_sb += -1.0 / s_b + b * b / (s_b * s_b * s_b);
                }
            }
            (ErcMode::Shared, BetaConstraint::NonNegative) => {
                for (j, &b) in beta.iter().enumerate() {
                    terms.prior += ln2 + normal_lpdf(b, 0.0, s_b);
                    terms.jacobian += raw[j];
                    g_raw[j] = (g_beta[j] - b / (s_b * s_b)) * b + 1.0;
                    grad_sb += -1.0 / s_b + b * b / (s_b * s_b * s_b);
                }
            }
            (ErcMode::Hierarchical, constraint) => {
                let l = corr.as_ref().expect("hierarchical factor");
                let mean = |j: usize| if b0.len() == 1 { b0[0] } else { b0[j] };
                let mut g_l = vec![0.0; s_n * s_n];
                // Prior on beta0.
                for (k, &m) in b0.iter().enumerate() {
                    terms.prior += normal_lpdf(m, 0.0, s_b);
                    g_b0[k] -= m / (s_b * s_b);
                    grad_sb += -1.0 / s_b + m * m / (s_b * s_b * s_b);
                }
                if constraint == BetaConstraint::Free {
                    for j in 0..j_n {
                        for s in 0..s_n {
                            let gb = g_beta[s * j_n + j];
                            let k = if b0.len() == 1 { 0 } else { j };
                            g_b0[k] += gb;
                            let lz: f64 = (0..=s).map(|m| l.get(s, m) * raw[m * j_n + j]).sum();
                            grad_sb += gb * self.xi0[s] * lz;
                            for m in 0..=s {
                                g_raw[m * j_n + j] += gb * s_b * self.xi0[s] * l.get(s, m);
                                g_l[s * s_n + m] += gb * s_b * self.xi0[s] * raw[m * j_n + j];
                            }
                        }
                    }
                    for (k, &z) in raw.iter().enumerate() {
                        terms.prior += -0.5 * z * z - HALF_LN_2PI;
                        g_raw[k] -= z;
                    }
                } else {
                    let log_det_l: f64 = (0..s_n).map(|i| l.get(i, i).ln()).sum();
                    let log_xi0: f64 = self.xi0.iter().map(|v| v.ln()).sum();
                    let mut g_b = g_beta.clone();
                    for j in 0..j_n {
                        // y = D^-1 (beta - beta0) / sigma_B, v = L^-1 y, a = L^-T v.
                        let y: Vec<f64> =
                            (0..s_n).map(|s| (beta[s * j_n + j] - mean(j)) / (s_b * self.xi0[s])).collect();
                        let mut v = vec![0.0; s_n];
                        for s in 0..s_n {
                            let acc: f64 = (0..s).map(|m| l.get(s, m) * v[m]).sum();
                            v[s] = (y[s] - acc) / l.get(s, s);
                        }
                        let mut a = vec![0.0; s_n];
                        for s in (0..s_n).rev() {
                            let acc: f64 = (s + 1..s_n).map(|m| l.get(m, s) * a[m]).sum();
                            a[s] = (v[s] - acc) / l.get(s, s);
                        }
                        let vv: f64 = v.iter().map(|x| x * x).sum();
                        terms.prior += -0.5 * vv
                            - s_n as f64 * (HALF_LN_2PI + s_b.ln())
                            - log_xi0
                            - log_det_l;
                        let k = if b0.len() == 1 { 0 } else { j };
                        for s in 0..s_n {
                            let d = a[s] / (self.xi0[s] * s_b);
                            g_b[s * j_n + j] -= d;
                            g_b0[k] += d;
                        }
                        grad_sb += (-(s_n as f64) + vv) / s_b;
                        for s in 0..s_n {
                            for m in 0..=s {
                                g_l[s * s_n + m] += a[s] * v[m];
                            }
                            g_l[s * s_n + s] -= 1.0 / l.get(s, s);
                        }
                    }
                    for (k, &r) in raw.iter().enumerate() {
                        terms.jacobian += r;
                        g_raw[k] = g_b[k] * beta[k] + 1.0;
                    }
                }
                // LKJ prior over the factor and the transform Jacobian.
                let mut g_diag = vec![0.0; s_n];
                terms.prior += lkj_cholesky_log_density(l, self.priors.lkj_eta, &mut g_diag);
                for (s, gd) in g_diag.iter().enumerate() {
                    g_l[s * s_n + s] += gd;
                }
                terms.jacobian += corr_logj.unwrap_or(0.0);
                corr_cholesky_backprop(&u[self.corr_idx.clone()], l, &g_l, &mut g_corr, true);
            }
        }

        if let Some(g) = grad {
            g.fill(0.0);
            g[self.psi_idx.clone()].copy_from_slice(&g_psi);
            g[self.zxi_idx.clone()].copy_from_slice(&g_xi);
            g[self.gamma_idx.clone()].copy_from_slice(&g_gamma);
            g[self.delta_idx.clone()].copy_from_slice(&g_zd);
            g[self.beta_idx.clone()].copy_from_slice(&g_raw);
            g[self.beta0_idx.clone()].copy_from_slice(&g_b0);
            g[self.corr_idx.clone()].copy_from_slice(&g_corr);
            self.sigma_psi.finish(u, s_psi, grad_spsi, &mut terms, Some(&mut *g));
            self.sigma_xi.finish(u, s_xi, grad_sxi, &mut terms, Some(&mut *g));
            self.sigma_gamma.finish(u, s_gamma, grad_sgamma, &mut terms, Some(&mut *g));
            self.sigma_delta.finish(u, s_delta, grad_sdelta, &mut terms, Some(&mut *g));
            self.sigma_b.finish(u, s_b, grad_sb, &mut terms, Some(g));
        } else {
            self.sigma_psi.finish(u, s_psi, 0.0, &mut terms, None);
            self.sigma_xi.finish(u, s_xi, 0.0, &mut terms, None);
            self.sigma_gamma.finish(u, s_gamma, 0.0, &mut terms, None);
            self.sigma_delta.finish(u, s_delta, 0.0, &mut terms, None);
            self.sigma_b.finish(u, s_b, 0.0, &mut terms, None);
        }
        terms
    }

    /// Linear predictor of every record.
    pub fn linear_predictor(&self, p: &OutcomeParams) -> Vec<f64> {
        let shared = self.mode == ErcMode::Shared;
        self.data
            .records
            .iter()
            .zip(&self.cells)
            .map(|(r, c)| {
                let t = &self.times[r.study];
                let time: f64 =
                    t.rows[c.time * t.df..(c.time + 1) * t.df].iter().zip(&p.delta[r.study]).map(|(a, b)| a * b).sum();
                let b = &p.beta[if shared { 0 } else { r.study }];
                let erc: f64 = self.basis.row(r.x).iter().zip(b).map(|(a, b)| a * b).sum();
                let cov: f64 = r.covariates.iter().zip(&p.gamma).map(|(a, b)| a * b).sum();
                p.psi[r.study] + p.xi[r.subject] + cov + time + erc
            })
            .collect()
    }

    fn correlation_names(&self) -> Vec<(usize, usize)> {
        let s_n = self.data.n_studies();
        (1..s_n).flat_map(|a| (0..a).map(move |b| (a, b))).collect()
    }

    pub fn constrained_names(&self) -> Vec<String> {
        let d = &self.data;
        let mut names: Vec<String> = d.studies.iter().map(|s| format!("psi[{s}]")).collect();
        names.push("sigma_Psi".into());
        names.extend(d.subjects.iter().map(|s| format!("xi[{}]", s.label)));
        names.push("sigma_xi".into());
        names.extend(d.covariate_names.iter().map(|c| format!("gamma[{c}]")));
        if d.n_covariates() > 0 {
            names.push("sigma_Gamma".into());
        }
        for (s, t) in d.studies.iter().zip(&self.times) {
            names.extend((0..t.df).map(|k| format!("delta[{s},{}]", k + 1)));
        }
        if self.times.iter().any(|t| t.df > 0) {
            names.push("sigma_Delta".into());
        }
        match self.mode {
            ErcMode::Shared => names.extend((0..self.n_basis).map(|j| format!("beta[{}]", j + 1))),
            ErcMode::Hierarchical => {
                for s in &d.studies {
                    names.extend((0..self.n_basis).map(|j| format!("beta[{s},{}]", j + 1)));
                }
                match self.beta0_idx.len() {
                    1 => names.push("beta0".into()),
                    n => names.extend((0..n).map(|j| format!("beta0[{}]", j + 1))),
                }
                for (a, b) in self.correlation_names() {
                    names.push(format!("Sigma[{},{}]", d.studies[a], d.studies[b]));
                }
            }
        }
        if self.n_basis > 0 {
            names.push("sigma_B".into());
        }
        names
    }

    pub fn flatten(&self, p: &OutcomeParams) -> Vec<f64> {
        let mut v = p.psi.clone();
        v.push(p.sigma_psi);
        v.extend(&p.xi);
        v.push(p.sigma_xi);
        v.extend(&p.gamma);
        if self.data.n_covariates() > 0 {
            v.push(p.sigma_gamma);
        }
        for dl in &p.delta {
            v.extend(dl);
        }
        if self.times.iter().any(|t| t.df > 0) {
            v.push(p.sigma_delta);
        }
        for b in &p.beta {
            v.extend(b);
        }
        if self.mode == ErcMode::Hierarchical {
            v.extend(&p.beta0);
            let s = p.corr.as_ref().map(|c| c.correlation()).unwrap_or_default();
            let s_n = self.data.n_studies();
            for (a, b) in self.correlation_names() {
                v.push(s[a * s_n + b]);
            }
        }
        if self.n_basis > 0 {
            v.push(p.sigma_b);
        }
        v
    }

    /// Reads back the quantities stored by [`OutcomeModel::flatten`]. The
    /// correlation factor is rebuilt by Cholesky decomposition.
    pub fn unflatten(&self, v: &[f64]) -> OutcomeParams {
        let d = &self.data;
        let s_n = d.n_studies();
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let psi = take(s_n);
        let sigma_psi = take(1)[0];
        let xi = take(d.n_subjects());
        let sigma_xi = take(1)[0];
        let gamma = take(d.n_covariates());
        let sigma_gamma = if d.n_covariates() > 0 { take(1)[0] } else { self.sigma_gamma.value(&[]) };
        let delta: Vec<Vec<f64>> = self.times.iter().map(|t| take(t.df)).collect();
        let sigma_delta = if self.times.iter().any(|t| t.df > 0) { take(1)[0] } else { self.sigma_delta.value(&[]) };
        let beta: Vec<Vec<f64>> = (0..self.n_beta_rows()).map(|_| take(self.n_basis)).collect();
        let (beta0, corr) = if self.mode == ErcMode::Hierarchical {
            let beta0 = take(self.beta0_idx.len());
            let pairs = self.correlation_names();
            let vals = take(pairs.len());
            let mut s = vec![0.0; s_n * s_n];
            for i in 0..s_n {
                s[i * s_n + i] = 1.0;
            }
            for ((a, b), r) in pairs.into_iter().zip(vals) {
                s[a * s_n + b] = r;
                s[b * s_n + a] = r;
            }
            (beta0, Some(cholesky_corr(&s, s_n)))
        } else {
            (Vec::new(), None)
        };
        let sigma_b = if self.n_basis > 0 { take(1)[0] } else { self.sigma_b.value(&[]) };
        OutcomeParams {
            psi,
            sigma_psi,
            xi,
            sigma_xi,
            gamma,
            sigma_gamma,
            delta,
            sigma_delta,
            beta,
            beta0,
            corr,
            sigma_b,
        }
    }
}

/// Cholesky factor of a correlation matrix with rows renormalized to unit
/// length against rounding.
fn cholesky_corr(s: &[f64], k: usize) -> CorrCholesky {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let acc: f64 = (0..j).map(|m| l[i * k + m] * l[j * k + m]).sum();
            if i == j {
                l[i * k + i] = (s[i * k + i] - acc).max(1e-300).sqrt();
            } else {
                l[i * k + j] = (s[i * k + j] - acc) / l[j * k + j];
            }
        }
        let norm: f64 = (0..=i).map(|m| l[i * k + m].powi(2)).sum::<f64>().sqrt();
        for m in 0..=i {
            l[i * k + m] /= norm;
        }
    }
    CorrCholesky::from_dense(k, l).unwrap_or_else(|_| CorrCholesky::identity(k))
}

impl Model for OutcomeModel {
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
        let s_n = self.data.n_studies();
        let mut cases = vec![0.0; s_n];
        let mut trials = vec![0.0; s_n];
        for r in &self.data.records {
            cases[r.study] += r.cases as f64;
            trials[r.study] += r.trials as f64;
        }
        for s in 0..s_n {
            let p = ((cases[s] + 0.5) / (trials[s] + 1.0)).clamp(1e-6, 1.0 - 1e-6);
            u[self.psi_idx.start + s] = (p / (1.0 - p)).ln();
        }
        for slot in [&self.sigma_xi, &self.sigma_delta, &self.sigma_b, &self.sigma_gamma] {
            if let Some(i) = slot.index {
                u[i] = -1.0;
            }
        }
        if self.constraint == BetaConstraint::NonNegative {
            u[self.beta_idx.clone()].fill(-2.0);
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

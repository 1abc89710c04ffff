//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use erc_core::exposure_fit::{PoolingVariant, WindowPolicy};
use erc_core::model::{BetaConstraint, ErcMode, ExposurePriors, OutcomePriors};
use erc_core::outcome_fit::{
    CurveAnchor, ErcSpec, DEFAULT_BOUNDARY_UGM3, DEFAULT_ERC_ORDER, DEFAULT_GRID_POINTS, DEFAULT_INTERIOR_UGM3,
};
use erc_core::sampler::SamplerSettings;
use erc_core::simulation::{replication_settings, ExposureSimSetup, OutcomeStudyConfig};
use serde::Deserialize;

use crate::error::{invalid, CliError};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub exposure: ExposureSection,
    #[serde(default)]
    pub assignment: AssignmentSection,
    #[serde(default)]
    pub outcome: OutcomeSection,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub simulation: SimulationSection,
}

fn default_seed() -> u64 {
    20190101
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Input files. Relative paths are resolved against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub exposure: Option<PathBuf>,
    /// Households without measurements: study_id, group_id, cluster_id, household_id.
    pub households: Option<PathBuf>,
    pub timeline: Option<PathBuf>,
    pub outcome: Option<PathBuf>,
    /// Defaults to `household_means.csv` in the output directory.
    pub household_means: Option<PathBuf>,
    /// Defaults to `assignments.csv` in the output directory.
    pub assignments: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureSection {
    #[serde(default)]
    pub priors: ExposurePriors,
    #[serde(default)]
    pub pooling: PoolingVariant,
    /// Take logs of a `raw_value` column; when false it is used as given.
    #[serde(default = "yes")]
    pub log_raw_values: bool,
}

impl Default for ExposureSection {
    fn default() -> Self {
        Self { priors: ExposurePriors::default(), pooling: PoolingVariant::default(), log_raw_values: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentSection {
    #[serde(default = "default_washout")]
    pub washout_days: usize,
    #[serde(default)]
    pub window_policy: WindowPolicy,
    /// Period `t` ends on day `start_day + t * period_days - 1` of the
    /// subject's timeline unless the outcome file has an `end_day` column.
    #[serde(default = "default_period_days")]
    pub period_days: i64,
}

impl Default for AssignmentSection {
    fn default() -> Self {
        Self { washout_days: default_washout(), window_policy: WindowPolicy::default(), period_days: default_period_days() }
    }
}

fn default_washout() -> usize {
    28
}

fn default_period_days() -> i64 {
    7
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotsUgm3 {
    pub lower: f64,
    pub upper: f64,
    pub interior: Vec<f64>,
}

impl Default for KnotsUgm3 {
    fn default() -> Self {
        Self { lower: DEFAULT_BOUNDARY_UGM3.0, upper: DEFAULT_BOUNDARY_UGM3.1, interior: DEFAULT_INTERIOR_UGM3.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSection {
    #[serde(default)]
    pub priors: OutcomePriors,
    #[serde(default)]
    pub mode: ErcMode,
    #[serde(default)]
    pub constraint: BetaConstraint,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default)]
    pub knots_ugm3: KnotsUgm3,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub anchor: CurveAnchor,
}

impl Default for OutcomeSection {
    fn default() -> Self {
        Self {
            priors: OutcomePriors::default(),
            mode: ErcMode::default(),
            constraint: BetaConstraint::default(),
            order: default_order(),
            knots_ugm3: KnotsUgm3::default(),
            grid_points: default_grid_points(),
            anchor: CurveAnchor::default(),
        }
    }
}

fn default_order() -> usize {
    DEFAULT_ERC_ORDER
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

impl OutcomeSection {
    pub fn erc(&self) -> Result<ErcSpec, CliError> {
        let k = &self.knots_ugm3;
        let spec = ErcSpec::from_ugm3(k.lower, k.upper, &k.interior, self.order)
            .map_err(|e| invalid(format!("outcome.knots_ugm3: {e}")))?;
        spec.basis().map_err(|e| invalid(format!("outcome: {e}")))?;
        Ok(spec.with_mode(self.mode, self.constraint))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_setups")]
    pub exposure_setups: Vec<ExposureSimSetup>,
    #[serde(default)]
    pub exposure_priors: ExposurePriors,
    #[serde(default = "default_exposure_reps")]
    pub exposure_replications: usize,
    #[serde(default = "default_outcome_reps")]
    pub outcome_replications: usize,
    #[serde(default = "yes")]
    pub run_exposure: bool,
    #[serde(default = "yes")]
    pub run_outcome: bool,
    #[serde(default)]
    pub outcome: OutcomeStudyConfig,
    #[serde(default = "replication_settings")]
    pub sampler: SamplerSettings,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            exposure_setups: default_setups(),
            exposure_priors: ExposurePriors::default(),
            exposure_replications: default_exposure_reps(),
            outcome_replications: default_outcome_reps(),
            run_exposure: true,
            run_outcome: true,
            outcome: OutcomeStudyConfig::default(),
            sampler: replication_settings(),
        }
    }
}

fn default_setups() -> Vec<ExposureSimSetup> {
    vec![ExposureSimSetup::setup1(), ExposureSimSetup::setup2(), ExposureSimSetup::setup3()]
}

fn default_exposure_reps() -> usize {
    100
}

fn default_outcome_reps() -> usize {
    50
}

impl RunConfig {
    /// Parses and validates `text`; relative paths are taken against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let d = &mut self.data;
        for p in [&mut d.exposure, &mut d.households, &mut d.timeline, &mut d.outcome, &mut d.household_means, &mut d.assignments]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.exposure.priors.validate().map_err(|e| invalid(format!("exposure.priors: {e}")))?;
        self.outcome.priors.validate().map_err(|e| invalid(format!("outcome.priors: {e}")))?;
        self.outcome.erc()?;
        if self.outcome.grid_points < 2 {
            return Err(invalid("outcome.grid_points must be at least 2"));
        }
        self.sampler.validate().map_err(|e| invalid(format!("sampler: {e}")))?;
        if self.assignment.washout_days == 0 {
            return Err(invalid("assignment.washout_days must be at least 1"));
        }
        if self.assignment.period_days < 1 {
            return Err(invalid("assignment.period_days must be at least 1"));
        }
        let sim = &self.simulation;
        for s in &sim.exposure_setups {
            s.validate().map_err(|e| invalid(format!("simulation.exposure_setups: {e}")))?;
        }
        sim.exposure_priors.validate().map_err(|e| invalid(format!("simulation.exposure_priors: {e}")))?;
        sim.outcome.priors.validate().map_err(|e| invalid(format!("simulation.outcome.priors: {e}")))?;
        sim.outcome.erc().map_err(|e| invalid(format!("simulation.outcome: {e}")))?;
        for f in &sim.outcome.fits {
            if f.setups.is_empty() || f.setups.iter().any(|&s| s >= sim.exposure_setups.len()) {
                return Err(invalid(format!("simulation.outcome.fits: {} refers to a missing setup", f.label)));
            }
        }
        sim.sampler.validate().map_err(|e| invalid(format!("simulation.sampler: {e}")))?;
        Ok(())
    }

    pub fn household_means_path(&self) -> PathBuf {
        self.data.household_means.clone().unwrap_or_else(|| self.out_dir.join("household_means.csv"))
    }

    pub fn assignments_path(&self) -> PathBuf {
        self.data.assignments.clone().unwrap_or_else(|| self.out_dir.join("assignments.csv"))
    }

    pub fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        path.as_deref().ok_or_else(|| invalid(format!("config: data.{key} is required for this command")))
    }
}

//! One function per subcommand.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use erc_core::exposure_fit::{
    assign_exposure, fit_exposure, unit_values_from_draw, AssignmentSource, HouseholdMean, HouseholdMeans,
    RHAT_THRESHOLD,
};
use erc_core::model::{BetaConstraint, ErcMode, OutcomeDatasetBuilder};
use erc_core::outcome_fit::{
    curve_grid, exposure_range, extract_curve, fit_outcome as fit_outcome_model, hierarchical_curves, ErcCurve,
};
use erc_core::sampler::SamplerSettings;
use erc_core::simulation::{error_table, run_exposure_study, run_outcome_study};
use erc_core::summary::diagnose_and_summarize;

use crate::config::RunConfig;
use crate::error::{invalid, CliError, Status};
use crate::io::*;

fn settings(cfg: &RunConfig, offset: u64) -> SamplerSettings {
    SamplerSettings { master_seed: cfg.seed.wrapping_add(offset), ..cfg.sampler.clone() }
}

fn exposure_draws_path(out: &Path, study: &str) -> PathBuf {
    out.join(format!("exposure_{}_draws.csv", file_label(study)))
}

/// Fits each study's exposure data and writes draws, summaries, fitted
/// values, pooling factors and the household means table.
pub fn fit_exposure_cmd(cfg: &RunConfig) -> Result<Status, CliError> {
    let path = RunConfig::require(&cfg.data.exposure, "exposure")?;
    let studies = read_exposure(path, cfg.data.households.as_deref(), cfg.exposure.log_raw_values)?;
    let mut labels = HashMap::new();
    for (s, _) in &studies {
        if let Some(other) = labels.insert(file_label(s), s.clone()) {
            return Err(invalid(format!("studies {other} and {s} map to the same file name")));
        }
    }
    let out = &cfg.out_dir;
    let mut status = Status::Ok;
    let mut means_rows = Vec::new();
    for (i, (study, data)) in studies.into_iter().enumerate() {
        log::info!("fitting exposure model for study {study}");
        let post = fit_exposure(data, cfg.exposure.priors.clone(), &settings(cfg, i as u64))?;
        let label = file_label(&study);
        write_draws(&exposure_draws_path(out, &study), post.draws())?;
        write_summary(&out.join(format!("exposure_{label}_summary.csv")), post.summaries())?;

        let data = post.data();
        let fitted = data.observations().iter().zip(post.fitted()).map(|(o, f)| {
            let h = &data.households()[o.household];
            vec![
                data.groups()[o.group].clone(),
                h.cluster.map(|k| data.clusters()[k].clone()).unwrap_or_default(),
                h.label.clone(),
                o.day.to_string(),
                num(o.model_time),
                num(o.w),
                num(*f),
            ]
        });
        write_csv(
            &out.join(format!("exposure_{label}_fitted.csv")),
            &["group", "cluster", "household", "day", "model_time", "log_value", "fitted"],
            fitted,
        )?;

        let pooling = post.pooling_factors(cfg.exposure.pooling);
        let mut rows = vec![vec!["household".to_string(), num(pooling.household)]];
        if let Some(c) = pooling.cluster {
            rows.push(vec!["cluster".into(), num(c)]);
        }
        rows.push(vec!["observation".into(), num(pooling.observation)]);
        write_csv(&out.join(format!("exposure_{label}_pooling.csv")), &["level", "lambda"], rows)?;

        means_rows.extend(post.household_means().rows().iter().map(|r| household_mean_row(&study, r)));
        if !post.converged() {
            log::warn!("study {study}: exposure fit did not converge");
            status = Status::ConvergenceWarning;
        }
    }
    write_csv(&cfg.household_means_path(), &HOUSEHOLD_MEANS_HEADER, means_rows)?;
    Ok(status)
}

/// Household means taken from one pooled draw of each study's exposure fit.
fn means_from_draw(cfg: &RunConfig, means: &[(String, HouseholdMeans)], draw: usize) -> Result<Vec<(String, HouseholdMeans)>, CliError> {
    means
        .iter()
        .map(|(study, m)| {
            let path = exposure_draws_path(&cfg.out_dir, study);
            let (draws, _) = read_draws(&path)?;
            if draw >= draws.total_draws() {
                return Err(invalid(format!(
                    "--draw {draw}: {} holds only {} draws",
                    path.display(),
                    draws.total_draws()
                )));
            }
            let d = draws.iter_draws().nth(draw).expect("index checked");
            let keys: Vec<_> = m.rows().iter().map(|r| r.key.clone()).collect();
            let values = unit_values_from_draw(draws.names(), d, &keys)?;
            let rows = keys
                .into_iter()
                .zip(values)
                .map(|(key, v)| HouseholdMean { key, mean: v, sd: 0.0, q025: v, q975: v })
                .collect();
            Ok((study.clone(), HouseholdMeans::new(rows)))
        })
        .collect()
}

/// Trailing-window exposure of every subject at every outcome period.
pub fn assign_exposure_cmd(cfg: &RunConfig, draw: Option<usize>) -> Result<Status, CliError> {
    let timelines = read_timeline(RunConfig::require(&cfg.data.timeline, "timeline")?)?;
    let (_, outcome) = read_outcome(RunConfig::require(&cfg.data.outcome, "outcome")?)?;
    let mut means = read_household_means(&cfg.household_means_path())?;
    let source = match draw {
        Some(n) => {
            means = means_from_draw(cfg, &means, n)?;
            AssignmentSource::Draw(n)
        }
        None => AssignmentSource::PosteriorMean,
    };
    let source_label = match source {
        AssignmentSource::PosteriorMean => "posterior_mean".to_string(),
        AssignmentSource::Draw(n) => format!("draw_{n}"),
    };

    // Periods per subject, subjects in order of first appearance.
    let mut subjects: Vec<(String, String, Vec<(i64, Option<i64>)>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for r in &outcome {
        let i = *index.entry(r.subject.clone()).or_insert_with(|| {
            subjects.push((r.subject.clone(), r.study.clone(), Vec::new()));
            subjects.len() - 1
        });
        if subjects[i].1 != r.study {
            return Err(invalid(format!("outcome line {}: subject {} appears in more than one study", r.line, r.subject)));
        }
        subjects[i].2.push((r.period, r.end_day));
    }

    let a = &cfg.assignment;
    let mut rows = Vec::new();
    for (subject, study, periods) in subjects {
        let timeline =
            timelines.get(&subject).ok_or_else(|| invalid(format!("subject {subject} has no exposure timeline")))?;
        let m = means
            .iter()
            .find(|(s, _)| *s == study)
            .map(|(_, m)| m)
            .ok_or_else(|| invalid(format!("study {study} has no household means")))?;
        let days: Vec<(i64, i64)> = periods
            .iter()
            .map(|&(p, end)| (p, end.unwrap_or(timeline.start_day() + p * a.period_days - 1)))
            .collect();
        for x in assign_exposure(timeline, m, a.washout_days, &days, a.window_policy, source)? {
            rows.push(vec![
                study.clone(),
                x.subject,
                x.period.to_string(),
                x.day.to_string(),
                num(x.x),
                x.washout.to_string(),
                x.covered_days.to_string(),
                source_label.clone(),
            ]);
        }
    }
    write_csv(&cfg.assignments_path(), &ASSIGNMENT_HEADER, rows)?;
    Ok(Status::Ok)
}

const CURVE_HEADER: [&str; 10] =
    ["x_ugm3", "x_log", "mean_logodds", "q025", "q975", "odds_ratio", "or_q025", "or_q975", "mode", "study"];

fn curve_rows(c: &ErcCurve) -> impl Iterator<Item = Vec<String>> + '_ {
    let mode = match c.mode {
        ErcMode::Shared => "shared",
        ErcMode::Hierarchical => "hierarchical",
    };
    (0..c.x_log.len()).map(move |i| {
        vec![
            num(c.x_ugm3[i]),
            num(c.x_log[i]),
            num(c.mean[i]),
            num(c.q025[i]),
            num(c.q975[i]),
            num(c.mean[i].exp()),
            num(c.q025[i].exp()),
            num(c.q975[i].exp()),
            mode.to_string(),
            c.study.clone().unwrap_or_default(),
        ]
    })
}

/// Fits the outcome model to the outcome data joined with the assigned
/// exposures and writes draws, summaries and curve grids.
pub fn fit_outcome_cmd(cfg: &RunConfig, restrict_nonneg: bool, hierarchical: bool) -> Result<Status, CliError> {
    let (covariates, outcome) = read_outcome(RunConfig::require(&cfg.data.outcome, "outcome")?)?;
    let assignments = read_assignments(&cfg.assignments_path())?;
    let mut b = OutcomeDatasetBuilder::new(covariates);
    for r in &outcome {
        let a = assignments.get(&(r.subject.clone(), r.period)).ok_or_else(|| {
            invalid(format!("outcome line {}: no assigned exposure for subject {} period {}", r.line, r.subject, r.period))
        })?;
        if a.study != r.study {
            return Err(invalid(format!(
                "outcome line {}: subject {} is in study {} but was assigned in study {}",
                r.line, r.subject, r.study, a.study
            )));
        }
        b.add_record(&r.study, &r.subject, r.period, r.cases, r.trials, &r.covariates, a.x)
            .map_err(|e| invalid(format!("outcome line {}: {e}", r.line)))?;
    }
    let data = b.build()?;
    let mode = if hierarchical { ErcMode::Hierarchical } else { cfg.outcome.mode };
    let constraint = if restrict_nonneg { BetaConstraint::NonNegative } else { cfg.outcome.constraint };
    let erc = cfg.outcome.erc()?.with_mode(mode, constraint);
    let grid = curve_grid(&erc, cfg.outcome.grid_points, exposure_range(&data));
    let post = fit_outcome_model(data, cfg.outcome.priors.clone(), &erc, &settings(cfg, 0))?;

    let out = &cfg.out_dir;
    write_draws(&out.join("outcome_draws.csv"), post.draws())?;
    write_summary(&out.join("outcome_summary.csv"), post.summaries())?;
    let overall = extract_curve(&post, &grid, cfg.outcome.anchor)?;
    let studies = if mode == ErcMode::Hierarchical { hierarchical_curves(&post, &grid)? } else { Vec::new() };
    let rows: Vec<Vec<String>> =
        std::iter::once(&overall).chain(&studies).flat_map(curve_rows).collect();
    write_csv(&out.join("erc_curve.csv"), &CURVE_HEADER, rows)?;
    Ok(if post.converged() { Status::Ok } else { Status::ConvergenceWarning })
}

/// Runs the configured simulation studies and writes their tables.
pub fn simulate_cmd(cfg: &RunConfig) -> Result<Status, CliError> {
    let sim = &cfg.simulation;
    let out = &cfg.out_dir;
    if sim.run_exposure {
        if sim.exposure_replications < 2 {
            return Err(invalid("simulation.exposure_replications must be at least 2"));
        }
        let reps = run_exposure_study(
            &sim.exposure_setups,
            &sim.exposure_priors,
            &sim.sampler,
            sim.exposure_replications,
            cfg.seed,
        )?;
        let rows = error_table(&reps).into_iter().map(|r| {
            vec![
                r.setup,
                r.estimator.label().to_string(),
                num(r.errors.group),
                r.errors.cluster.map(num).unwrap_or_default(),
                num(r.errors.household),
                r.n_replications.to_string(),
            ]
        });
        write_csv(
            &out.join("sim_error_table.csv"),
            &["setup", "estimator", "group_mse", "cluster_msep", "household_msep", "n_replications"],
            rows,
        )?;
    }
    if sim.run_outcome {
        if sim.outcome_replications < 1 {
            return Err(invalid("simulation.outcome_replications must be at least 1"));
        }
        let res = run_outcome_study(
            &sim.exposure_setups,
            &sim.outcome,
            &sim.sampler,
            sim.outcome_replications,
            cfg.seed.wrapping_add(1),
        )?;
        let mut rows = Vec::new();
        for (label, m) in res.labels.iter().zip(&res.metrics) {
            for (l, x) in res.grid.iter().enumerate() {
                rows.push(vec![
                    label.clone(),
                    num(*x),
                    num(x.exp()),
                    num(res.truth[l]),
                    num(m.relative_bias[l]),
                    num(m.rmse[l]),
                ]);
            }
        }
        write_csv(
            &out.join("sim_curve_metrics.csv"),
            &["fit", "x_log", "x_ugm3", "truth", "relative_bias", "rmse"],
            rows,
        )?;
    }
    Ok(Status::Ok)
}

/// Convergence report for a draws file; the summary table is written to
/// `out` when given.
pub fn diagnostics_cmd(draws_path: &Path, out: Option<&Path>) -> Result<Status, CliError> {
    let (draws, divergent) = read_draws(draws_path)?;
    let (diag, summaries) = diagnose_and_summarize(&draws);
    println!("draws: {} chains x {} draws, {} parameters", draws.n_chains(), draws.n_draws(), draws.dim());
    println!("divergent transitions: {divergent}");
    match diag.max_rhat() {
        Some(r) => println!("max R-hat: {r:.4}"),
        None => println!("max R-hat: unavailable"),
    }
    println!("min bulk ESS: {:.1}", diag.min_ess());
    let flagged: Vec<&str> = summaries
        .iter()
        .filter(|s| s.rhat.is_some_and(|r| r > RHAT_THRESHOLD))
        .map(|s| s.name.as_str())
        .collect();
    for w in &diag.warnings {
        println!("warning: {w}");
    }
    if !flagged.is_empty() {
        println!("R-hat above {RHAT_THRESHOLD}: {}", flagged.join(", "));
    }
    if let Some(dir) = out {
        write_summary(&dir.join("diagnostics_summary.csv"), &summaries)?;
    }
    Ok(if flagged.is_empty() { Status::Ok } else { Status::ConvergenceWarning })
}

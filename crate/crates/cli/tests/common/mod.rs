#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use erc_core::simulation::{simulate_exposure, ExposureSimSetup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PERIODS: i64 = 10;

fn setups() -> Vec<(&'static str, ExposureSimSetup)> {
    let a = ExposureSimSetup {
        name: "A".into(),
        group_means: vec![4.0, 5.0],
        clusters_per_group: 3,
        households_per_cluster: 4,
        obs_per_household: 3,
        ..ExposureSimSetup::setup1()
    };
    let b = ExposureSimSetup {
        name: "B".into(),
        group_means: vec![3.5, 5.5],
        clusters_per_group: 0,
        households_per_cluster: 6,
        obs_per_household: 2,
        ..ExposureSimSetup::setup3()
    };
    vec![("A", a), ("B", b)]
}

/// Writes exposure, timeline and outcome files for two studies into `dir`.
/// The outcome log odds rise by `effect` per unit of log exposure.
pub fn write_inputs(dir: &Path, seed: u64, effect: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exposure = String::from("study_id,group_id,cluster_id,household_id,day,model_time,log_value\n");
    let mut timeline = String::from("subject_id,start_day,end_day,group_id,cluster_id,household_id\n");
    let mut outcome = String::from("study_id,subject_id,period,cases,trials,age\n");
    for (study, setup) in setups() {
        let sim = simulate_exposure(&setup, &mut rng).unwrap();
        let data = &sim.data;
        for o in data.observations() {
            let h = &data.households()[o.household];
            let cluster = h.cluster.map(|k| data.clusters()[k].clone()).unwrap_or_default();
            writeln!(exposure, "{study},{},{cluster},{},{},{},{}", data.groups()[o.group], h.label, o.day, o.model_time, o.w)
                .unwrap();
        }
        let units = data.units();
        for (i, u) in units.iter().enumerate() {
            let h = &data.households()[u.household];
            let cluster = h.cluster.map(|k| data.clusters()[k].clone()).unwrap_or_default();
            let subject = format!("{study}-s{i}");
            // Every third subject moves to the next household on day 120.
            let mut x = sim.truths.household[u.household];
            if i % 3 == 2 && i + 1 < units.len() {
                let v = units[i + 1];
                let h2 = &data.households()[v.household];
                let c2 = h2.cluster.map(|k| data.clusters()[k].clone()).unwrap_or_default();
                writeln!(timeline, "{subject},1,119,{},{cluster},{}", data.groups()[u.group], h.label).unwrap();
                writeln!(timeline, "{subject},120,400,{},{c2},{}", data.groups()[v.group], h2.label).unwrap();
                x = 0.5 * (x + sim.truths.household[v.household]);
            } else {
                writeln!(timeline, "{subject},1,400,{},{cluster},{}", data.groups()[u.group], h.label).unwrap();
            }
            let age: f64 = rng.random::<f64>() - 0.5;
            for t in 1..=PERIODS {
                let eta = -1.0 + effect * (x - 4.5) + 0.3 * age;
                let p = 1.0 / (1.0 + (-eta).exp());
                let trials = 3;
                let cases = (0..trials).filter(|_| rng.random::<f64>() < p).count();
                writeln!(outcome, "{study},{subject},{t},{cases},{trials},{age}").unwrap();
            }
        }
    }
    std::fs::write(dir.join("exposure.csv"), exposure).unwrap();
    std::fs::write(dir.join("timeline.csv"), timeline).unwrap();
    std::fs::write(dir.join("outcome.csv"), outcome).unwrap();
}

/// Config for the files written by [`write_inputs`]; `extra` is appended.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 11
out_dir = "out"

[data]
exposure = "exposure.csv"
timeline = "timeline.csv"
outcome = "outcome.csv"

[exposure.priors]
trend_df = 2
sigma_g = {{ kind = "fixed", value = 2.0 }}

[assignment]
washout_days = 28
period_days = 28

[outcome]
grid_points = 25

[outcome.priors]
time_df = 2

[outcome.knots_ugm3]
lower = 20.0
upper = 500.0
interior = [50.0, 100.0, 200.0]

[sampler]
n_chains = 2
n_warmup = 500
n_draws = 300
{extra}
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn erc(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_erc")).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs fit-exposure, assign-exposure and fit-outcome with `config`.
pub fn pipeline(config: &Path, outcome_flags: &[&str]) -> [Run; 3] {
    let c = config.to_str().unwrap();
    let a = erc(&["fit-exposure", "--config", c]);
    let b = erc(&["assign-exposure", "--config", c]);
    let mut args = vec!["fit-outcome", "--config", c];
    args.extend_from_slice(outcome_flags);
    let d = erc(&args);
    [a, b, d]
}

/// Rows of a CSV file as maps from column to value.
pub fn read_rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(String::from)).collect())
        .collect()
}

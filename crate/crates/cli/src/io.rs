//! CSV input and output.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use csv::StringRecord;
use erc_core::exposure_fit::{HouseholdMean, HouseholdMeans, Segment, SubjectTimeline, UnitKey};
use erc_core::model::{ExposureDataset, ExposureDatasetBuilder};
use erc_core::sampler::PosteriorDraws;
use erc_core::summary::ParamSummary;

use crate::error::{invalid, CliError};

/// Writes rows to `path` through a temporary file that is renamed into
/// place once complete.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let io = |e: &dyn std::fmt::Display| CliError::Internal(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(&e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| io(&e))?;
        w.write_record(header).map_err(|e| io(&e))?;
        for r in rows {
            w.write_record(&r).map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io(&e))
}

pub fn num(v: f64) -> String {
    v.to_string()
}

/// A CSV file with a mandatory header row, read whole.
pub struct Table {
    path: PathBuf,
    columns: HashMap<String, usize>,
    pub header: Vec<String>,
    pub rows: Vec<(u64, StringRecord)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let name = path.display().to_string();
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| invalid(format!("{name}: {e}")))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| invalid(format!("{name}: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if header.iter().all(|h| h.is_empty()) {
            return Err(invalid(format!("{name}: missing header row")));
        }
        let mut columns = HashMap::new();
        for (i, h) in header.iter().enumerate() {
            if columns.insert(h.clone(), i).is_some() {
                return Err(invalid(format!("{name}: duplicate column {h}")));
            }
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| invalid(format!("{name}: {e}")))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { path: path.to_path_buf(), columns, header, rows })
    }

    pub fn has(&self, column: &str) -> bool {
        self.columns.contains_key(column)
    }

    pub fn require(&self, columns: &[&str]) -> Result<(), CliError> {
        for c in columns {
            if !self.has(c) {
                return Err(invalid(format!("{}: missing column {c}", self.path.display())));
            }
        }
        Ok(())
    }

    pub fn error(&self, line: u64, column: &str, msg: impl std::fmt::Display) -> CliError {
        invalid(format!("{}: line {line}, column {column}: {msg}", self.path.display()))
    }

    /// Raw field; empty when the column is absent.
    pub fn field<'a>(&self, rec: &'a StringRecord, column: &str) -> &'a str {
        self.columns.get(column).and_then(|&i| rec.get(i)).map_or("", str::trim)
    }

    pub fn text(&self, line: u64, rec: &StringRecord, column: &str) -> Result<String, CliError> {
        let v = self.field(rec, column);
        if v.is_empty() {
            return Err(self.error(line, column, "missing value"));
        }
        Ok(v.to_string())
    }

    pub fn optional(&self, rec: &StringRecord, column: &str) -> Option<String> {
        let v = self.field(rec, column);
        (!v.is_empty()).then(|| v.to_string())
    }

    pub fn parse<T: std::str::FromStr>(&self, line: u64, rec: &StringRecord, column: &str) -> Result<T, CliError> {
        let v = self.text(line, rec, column)?;
        v.parse().map_err(|_| self.error(line, column, format!("cannot parse '{v}'")))
    }

    pub fn float(&self, line: u64, rec: &StringRecord, column: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(line, rec, column)?;
        if !v.is_finite() {
            return Err(self.error(line, column, format!("non-finite value {v}")));
        }
        Ok(v)
    }
}

/// Reads the exposure file into one dataset per study, in order of first
/// appearance. `declared` adds households without measurements.
pub fn read_exposure(
    path: &Path,
    declared: Option<&Path>,
    log_raw_values: bool,
) -> Result<Vec<(String, ExposureDataset)>, CliError> {
    let t = Table::read(path)?;
    t.require(&["study_id", "group_id", "household_id", "day", "model_time"])?;
    let value_col = match (t.has("log_value"), t.has("raw_value")) {
        (true, false) => "log_value",
        (false, true) => "raw_value",
        _ => return Err(invalid(format!("{}: need exactly one of log_value and raw_value", path.display()))),
    };
    let mut studies: Vec<(String, ExposureDatasetBuilder)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut builder = |study: String| -> usize {
        *index.entry(study.clone()).or_insert_with(|| {
            studies.push((study, ExposureDatasetBuilder::new()));
            studies.len() - 1
        })
    };
    let mut slots = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let s = builder(t.text(*line, rec, "study_id")?);
        slots.push(s);
    }
    let mut declared_rows = Vec::new();
    if let Some(p) = declared {
        let d = Table::read(p)?;
        d.require(&["study_id", "group_id", "household_id"])?;
        for (line, rec) in &d.rows {
            let s = builder(d.text(*line, rec, "study_id")?);
            declared_rows.push((
                s,
                d.text(*line, rec, "group_id")?,
                d.optional(rec, "cluster_id"),
                d.text(*line, rec, "household_id")?,
            ));
        }
    }
    for ((line, rec), s) in t.rows.iter().zip(slots) {
        let group = t.text(*line, rec, "group_id")?;
        let cluster = t.optional(rec, "cluster_id");
        let household = t.text(*line, rec, "household_id")?;
        let day: i64 = t.parse(*line, rec, "day")?;
        let model_time = t.float(*line, rec, "model_time")?;
        let mut w = t.float(*line, rec, value_col)?;
        if value_col == "raw_value" && log_raw_values {
            if w <= 0.0 {
                return Err(t.error(*line, value_col, format!("raw concentration {w} must be positive")));
            }
            w = w.ln();
        }
        studies[s]
            .1
            .add_observation(&group, cluster.as_deref(), &household, day, model_time, w)
            .map_err(|e| t.error(*line, "household_id", e))?;
    }
    for (s, group, cluster, household) in declared_rows {
        studies[s].1.declare_unit(&group, cluster.as_deref(), &household)?;
    }
    studies
        .into_iter()
        .map(|(s, b)| b.build().map(|d| (s.clone(), d)).map_err(|e| invalid(format!("study {s}: {e}"))))
        .collect()
}

/// Subject timelines keyed by subject.
pub fn read_timeline(path: &Path) -> Result<HashMap<String, SubjectTimeline>, CliError> {
    let t = Table::read(path)?;
    t.require(&["subject_id", "start_day", "end_day", "group_id", "household_id"])?;
    let mut segs: Vec<(String, Vec<Segment>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, rec) in &t.rows {
        let subject = t.text(*line, rec, "subject_id")?;
        let seg = Segment {
            start_day: t.parse(*line, rec, "start_day")?,
            end_day: t.parse(*line, rec, "end_day")?,
            group: t.text(*line, rec, "group_id")?,
            cluster: t.optional(rec, "cluster_id"),
            household: t.text(*line, rec, "household_id")?,
        };
        if seg.end_day < seg.start_day {
            return Err(t.error(*line, "end_day", "end_day precedes start_day"));
        }
        let i = *index.entry(subject.clone()).or_insert_with(|| {
            segs.push((subject, Vec::new()));
            segs.len() - 1
        });
        segs[i].1.push(seg);
    }
    segs.into_iter()
        .map(|(s, v)| {
            SubjectTimeline::new(&s, v).map(|tl| (s.clone(), tl)).map_err(|e| invalid(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub const HOUSEHOLD_MEANS_HEADER: [&str; 8] =
    ["study", "group", "cluster", "household", "posterior_mean_log", "sd", "q025", "q975"];

pub fn household_mean_row(study: &str, r: &HouseholdMean) -> Vec<String> {
    vec![
        study.to_string(),
        r.key.group.clone(),
        r.key.cluster.clone().unwrap_or_default(),
        r.key.household.clone(),
        num(r.mean),
        num(r.sd),
        num(r.q025),
        num(r.q975),
    ]
}

/// Household means per study, studies in order of first appearance.
pub fn read_household_means(path: &Path) -> Result<Vec<(String, HouseholdMeans)>, CliError> {
    let t = Table::read(path)?;
    t.require(&HOUSEHOLD_MEANS_HEADER)?;
    let mut out: Vec<(String, Vec<HouseholdMean>)> = Vec::new();
    for (line, rec) in &t.rows {
        let study = t.text(*line, rec, "study")?;
        let row = HouseholdMean {
            key: UnitKey {
                group: t.text(*line, rec, "group")?,
                cluster: t.optional(rec, "cluster"),
                household: t.text(*line, rec, "household")?,
            },
            mean: t.float(*line, rec, "posterior_mean_log")?,
            sd: t.float(*line, rec, "sd")?,
            q025: t.float(*line, rec, "q025")?,
            q975: t.float(*line, rec, "q975")?,
        };
        match out.iter_mut().find(|(s, _)| *s == study) {
            Some((_, v)) => v.push(row),
            None => out.push((study, vec![row])),
        }
    }
    Ok(out.into_iter().map(|(s, v)| (s, HouseholdMeans::new(v))).collect())
}

pub const SUMMARY_HEADER: [&str; 8] = ["parameter", "mean", "sd", "q025", "q500", "q975", "rhat", "ess"];

pub fn write_summary(path: &Path, summaries: &[ParamSummary]) -> Result<(), CliError> {
    write_csv(
        path,
        &SUMMARY_HEADER,
        summaries.iter().map(|s| {
            vec![
                s.name.clone(),
                num(s.mean),
                num(s.sd),
                num(s.q025),
                num(s.q500),
                num(s.q975),
                s.rhat.map(num).unwrap_or_default(),
                num(s.ess),
            ]
        }),
    )
}

/// Sampler columns written ahead of the parameters; names end in `__`.
const STAT_COLUMNS: [&str; 6] = ["chain__", "draw__", "divergent__", "treedepth__", "accept_stat__", "stepsize__"];

pub fn write_draws(path: &Path, draws: &PosteriorDraws) -> Result<(), CliError> {
    let mut header: Vec<&str> = STAT_COLUMNS.to_vec();
    header.extend(draws.names().iter().map(String::as_str));
    let stats = draws.stats();
    let rows = (0..draws.n_chains()).flat_map(|c| {
        (0..draws.n_draws()).map(move |d| {
            let i = c * draws.n_draws() + d;
            let mut row = vec![c.to_string(), d.to_string()];
            match stats.get(i) {
                Some(s) => row.extend([
                    u8::from(s.divergent).to_string(),
                    s.tree_depth.to_string(),
                    num(s.accept_stat),
                    num(s.step_size),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            row.extend(draws.draw(c, d).iter().map(|v| num(*v)));
            row
        })
    });
    write_csv(path, &header, rows)
}

/// Draws read back from a draws file, with the number of divergent
/// transitions recorded in it.
pub fn read_draws(path: &Path) -> Result<(PosteriorDraws, usize), CliError> {
    let t = Table::read(path)?;
    t.require(&["chain__", "draw__"])?;
    let params: Vec<String> = t.header.iter().filter(|h| !h.ends_with("__")).cloned().collect();
    if params.is_empty() {
        return Err(invalid(format!("{}: no parameter columns", path.display())));
    }
    let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut divergent = 0;
    for (line, rec) in &t.rows {
        let c: usize = t.parse(*line, rec, "chain__")?;
        let d: usize = t.parse(*line, rec, "draw__")?;
        if c > chains.len() {
            return Err(t.error(*line, "chain__", "chains must be numbered consecutively from 0"));
        }
        if c == chains.len() {
            chains.push(Vec::new());
        }
        if d != chains[c].len() {
            return Err(t.error(*line, "draw__", format!("expected draw {}", chains[c].len())));
        }
        if t.optional(rec, "divergent__").as_deref() == Some("1") {
            divergent += 1;
        }
        let v: Vec<f64> = params.iter().map(|p| t.float(*line, rec, p)).collect::<Result<_, _>>()?;
        chains[c].push(v);
    }
    let n_draws = chains.first().map_or(0, Vec::len);
    if n_draws == 0 || chains.iter().any(|c| c.len() != n_draws) {
        return Err(invalid(format!("{}: chains are empty or of unequal length", path.display())));
    }
    let n_chains = chains.len();
    let values: Vec<f64> = chains.into_iter().flatten().flatten().collect();
    Ok((PosteriorDraws::from_values(params, n_chains, n_draws, values), divergent))
}

/// File-name-safe form of a study label.
pub fn file_label(study: &str) -> String {
    study.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRow {
    pub line: u64,
    pub study: String,
    pub subject: String,
    pub period: i64,
    pub cases: u64,
    pub trials: u64,
    pub end_day: Option<i64>,
    pub covariates: Vec<f64>,
}

const OUTCOME_COLUMNS: [&str; 6] = ["study_id", "subject_id", "period", "cases", "trials", "end_day"];

/// Outcome records and the names of their covariate columns, which are all
/// columns other than the fixed ones.
pub fn read_outcome(path: &Path) -> Result<(Vec<String>, Vec<OutcomeRow>), CliError> {
    let t = Table::read(path)?;
    t.require(&OUTCOME_COLUMNS[..5])?;
    let covariates: Vec<String> = t.header.iter().filter(|h| !OUTCOME_COLUMNS.contains(&h.as_str())).cloned().collect();
    let mut rows = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let cases: u64 = t.parse(*line, rec, "cases")?;
        let trials: u64 = t.parse(*line, rec, "trials")?;
        if trials == 0 {
            return Err(t.error(*line, "trials", "trials must be positive"));
        }
        if cases > trials {
            return Err(t.error(*line, "cases", format!("cases {cases} exceed trials {trials}")));
        }
        let end_day = match t.optional(rec, "end_day") {
            Some(_) => Some(t.parse(*line, rec, "end_day")?),
            None if t.has("end_day") => return Err(t.error(*line, "end_day", "missing value")),
            None => None,
        };
        rows.push(OutcomeRow {
            line: *line,
            study: t.text(*line, rec, "study_id")?,
            subject: t.text(*line, rec, "subject_id")?,
            period: t.parse(*line, rec, "period")?,
            cases,
            trials,
            end_day,
            covariates: covariates.iter().map(|c| t.float(*line, rec, c)).collect::<Result<_, _>>()?,
        });
    }
    if rows.is_empty() {
        return Err(invalid(format!("{}: no records", path.display())));
    }
    Ok((covariates, rows))
}

pub const ASSIGNMENT_HEADER: [&str; 8] =
    ["study", "subject", "period", "day", "x_it", "washout_days", "covered_days", "source"];

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentRow {
    pub study: String,
    pub subject: String,
    pub period: i64,
    pub x: f64,
}

pub fn read_assignments(path: &Path) -> Result<HashMap<(String, i64), AssignmentRow>, CliError> {
    let t = Table::read(path)?;
    t.require(&ASSIGNMENT_HEADER)?;
    let mut out = HashMap::new();
    for (line, rec) in &t.rows {
        let row = AssignmentRow {
            study: t.text(*line, rec, "study")?,
            subject: t.text(*line, rec, "subject")?,
            period: t.parse(*line, rec, "period")?,
            x: t.float(*line, rec, "x_it")?,
        };
        if out.insert((row.subject.clone(), row.period), row).is_some() {
            return Err(t.error(*line, "period", "duplicate subject and period"));
        }
    }
    Ok(out)
}

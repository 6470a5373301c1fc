use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ebsa_core::ebsa::{solve, SolveReport, SolveStatus, SolverConfig};
use ebsa_core::metrics::{infeasibility, ratios, InfeaseBreakdown, InfeaseOptions};
use ebsa_core::protocol::{derive_seed, perturbed_start, START_SCALE};
use ebsa_core::BilevelProblem;
use serde::Serialize;

use crate::CliError;

/// One row per (problem, repetition).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub problem: String,
    pub rep: usize,
    /// Seed of this run's start perturbation.
    pub seed: u64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub status: String,
    pub stop_rule: Option<u8>,
    pub iterations: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(rename = "F_val")]
    pub upper_obj: f64,
    #[serde(rename = "f_val")]
    pub lower_obj: f64,
    #[serde(rename = "R_F")]
    pub r_upper: Option<f64>,
    #[serde(rename = "R_f")]
    pub r_lower: Option<f64>,
    pub infease: Option<f64>,
    pub applicable: bool,
    /// Seconds spent in the solver, excluding the Infease estimate.
    pub wall_time: f64,
    pub error: Option<String>,
}

pub const RECORD_HEADER: &[&str] = &[
    "problem",
    "rep",
    "seed",
    "x0",
    "y0",
    "status",
    "stop_rule",
    "iterations",
    "x",
    "y",
    "F_val",
    "f_val",
    "R_F",
    "R_f",
    "infease",
    "applicable",
    "wall_time",
    "error",
];

/// Shortest round-trip text, switching to exponent form for tiny or huge values.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|&a| num(a)).collect::<Vec<_>>().join(" ")
}

fn opt(v: &Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl RunRecord {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.problem.clone(),
            self.rep.to_string(),
            self.seed.to_string(),
            join(&self.x0),
            join(&self.y0),
            self.status.clone(),
            self.stop_rule.map(|r| r.to_string()).unwrap_or_default(),
            self.iterations.to_string(),
            join(&self.x),
            join(&self.y),
            num(self.upper_obj),
            num(self.lower_obj),
            opt(&self.r_upper),
            opt(&self.r_lower),
            opt(&self.infease),
            self.applicable.to_string(),
            num(self.wall_time),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// Everything produced by one run.
pub struct RunOutput {
    pub record: RunRecord,
    pub report: Option<SolveReport>,
    pub infease: Option<InfeaseBreakdown>,
}

/// Solves `prob` from the start drawn for `(seed, rep)` and scores the result.
pub fn run_one(prob: &BilevelProblem, cfg: &SolverConfig, base_seed: u64, rep: usize) -> RunOutput {
    let seed = derive_seed(base_seed, prob.name(), rep);
    let (x0, y0) = perturbed_start(prob, seed, START_SCALE);
    let mut record = RunRecord {
        problem: prob.name().to_string(),
        rep,
        seed,
        x0: x0.clone(),
        y0: y0.clone(),
        status: String::new(),
        stop_rule: None,
        iterations: 0,
        x: Vec::new(),
        y: Vec::new(),
        upper_obj: f64::NAN,
        lower_obj: f64::NAN,
        r_upper: None,
        r_lower: None,
        infease: None,
        applicable: false,
        wall_time: 0.0,
        error: None,
    };
    let start = Instant::now();
    let report = match solve(prob, cfg, &x0, &y0) {
        Ok(r) => r,
        Err(e) => {
            record.wall_time = start.elapsed().as_secs_f64();
            record.status = "Error".into();
            record.error = Some(e.to_string());
            return RunOutput {
                record,
                report: None,
                infease: None,
            };
        }
    };
    record.wall_time = start.elapsed().as_secs_f64();
    record.status = report.status.as_str().to_string();
    record.stop_rule = report.stop_rule;
    record.iterations = report.iterations;
    record.x = report.x.clone();
    record.y = report.y.clone();
    record.upper_obj = report.upper_obj;
    record.lower_obj = report.lower_obj;
    if let Some(r) = prob.reference() {
        let (rf, rl) = ratios(report.upper_obj, report.lower_obj, r.upper_obj, r.lower_obj);
        record.r_upper = Some(rf);
        record.r_lower = Some(rl);
    }
    let infease = match infeasibility(prob, &report.x, &report.y, &InfeaseOptions::default()) {
        Ok(b) => {
            record.infease = Some(b.total);
            record.applicable = b.applicable;
            if !b.reliable {
                record.error = Some("value function estimate failed; Infease gap unavailable".into());
            }
            Some(b)
        }
        Err(e) => {
            record.error = Some(format!("Infease: {e}"));
            None
        }
    };
    RunOutput {
        record,
        report: Some(report),
        infease,
    }
}

pub fn converged(status: &str) -> bool {
    status == SolveStatus::ResConverged.as_str()
}

/// Per-iteration CSV of a solve.
pub fn write_trace(path: &Path, report: &SolveReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record([
        "k", "kind", "res", "d_norm", "sigma", "theta", "F", "r", "rho", "c", "gamma", "tau", "eps_k", "alpha",
        "inner_iterations", "inner_status", "x", "y", "elapsed",
    ])
    .map_err(io)?;
    for h in &report.history {
        w.write_record([
            h.k.to_string(),
            format!("{:?}", h.kind),
            num(h.res),
            num(h.d_norm),
            num(h.sigma),
            num(h.theta),
            num(h.upper_obj),
            num(h.r),
            num(h.rho),
            num(h.c),
            num(h.gamma),
            num(h.tau),
            num(h.eps_k),
            num(h.alpha),
            h.inner_iterations.to_string(),
            format!("{:?}", h.inner_status),
            join(&h.x),
            join(&h.y),
            num(h.elapsed),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_records_csv(path: &Path, records: &[RunRecord]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(RECORD_HEADER).map_err(io)?;
    for r in records {
        w.write_record(r.csv_row()).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Aggregate over the repetitions of one problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub problem: String,
    /// `best` or `median`.
    pub stat: String,
    pub reps: usize,
    pub applicable_count: usize,
    #[serde(rename = "F_val")]
    pub upper_obj: f64,
    #[serde(rename = "f_val")]
    pub lower_obj: f64,
    #[serde(rename = "R_F")]
    pub r_upper: Option<f64>,
    #[serde(rename = "R_f")]
    pub r_lower: Option<f64>,
    pub infease: Option<f64>,
    pub wall_time: f64,
    pub iterations: f64,
}

pub const SUMMARY_HEADER: &[&str] = &[
    "problem",
    "stat",
    "reps",
    "applicable_count",
    "F_val",
    "f_val",
    "R_F",
    "R_f",
    "infease",
    "wall_time",
    "iterations",
];

impl SummaryRow {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.problem.clone(),
            self.stat.clone(),
            self.reps.to_string(),
            self.applicable_count.to_string(),
            num(self.upper_obj),
            num(self.lower_obj),
            opt(&self.r_upper),
            opt(&self.r_lower),
            opt(&self.infease),
            num(self.wall_time),
            num(self.iterations),
        ]
    }
}

/// Median of the finite values, or NaN when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().filter(|a| a.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_opt(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let m = median(values.into_iter().flatten());
    m.is_finite().then_some(m)
}

/// The representative run of a problem: the applicable run with the
/// smallest `F` (ties to the lower repetition); without an applicable run,
/// the one with the smallest Infease.
pub fn best_run(runs: &[&RunRecord]) -> Option<usize> {
    let key = |r: &RunRecord| if r.upper_obj.is_nan() { f64::INFINITY } else { r.upper_obj };
    let applicable = (0..runs.len())
        .filter(|&i| runs[i].applicable)
        .min_by(|&a, &b| key(runs[a]).total_cmp(&key(runs[b])).then(a.cmp(&b)));
    applicable.or_else(|| {
        (0..runs.len()).min_by(|&a, &b| {
            let ia = runs[a].infease.unwrap_or(f64::INFINITY);
            let ib = runs[b].infease.unwrap_or(f64::INFINITY);
            ia.total_cmp(&ib).then(a.cmp(&b))
        })
    })
}

/// Best and median rows for each problem, in first-appearance order.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.problem.as_str()) {
            names.push(&r.problem);
        }
    }
    let mut rows = Vec::new();
    for name in names {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.problem == name).collect();
        let applicable_count = runs.iter().filter(|r| r.applicable).count();
        let reps = runs.len();
        if let Some(b) = best_run(&runs) {
            let b = runs[b];
            rows.push(SummaryRow {
                problem: name.to_string(),
                stat: "best".into(),
                reps,
                applicable_count,
                upper_obj: b.upper_obj,
                lower_obj: b.lower_obj,
                r_upper: b.r_upper,
                r_lower: b.r_lower,
                infease: b.infease,
                wall_time: b.wall_time,
                iterations: b.iterations as f64,
            });
        }
        rows.push(SummaryRow {
            problem: name.to_string(),
            stat: "median".into(),
            reps,
            applicable_count,
            upper_obj: median(runs.iter().map(|r| r.upper_obj)),
            lower_obj: median(runs.iter().map(|r| r.lower_obj)),
            r_upper: median_opt(runs.iter().map(|r| r.r_upper)),
            r_lower: median_opt(runs.iter().map(|r| r.r_lower)),
            infease: median_opt(runs.iter().map(|r| r.infease)),
            wall_time: median(runs.iter().map(|r| r.wall_time)),
            iterations: median(runs.iter().map(|r| r.iterations as f64)),
        });
    }
    rows
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(SUMMARY_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r.csv_row()).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Two whitespace-separated columns: 1-based case index and value, values
/// sorted ascending. Non-finite values are dropped.
pub fn write_dat(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<(), CliError> {
    let mut v: Vec<f64> = values.into_iter().filter(|a| a.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let mut text = String::new();
    for (i, a) in v.iter().enumerate() {
        text.push_str(&format!("{} {:e}\n", i + 1, a));
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(problem: &str, rep: usize, f: f64, infease: f64, applicable: bool) -> RunRecord {
        RunRecord {
            problem: problem.into(),
            rep,
            seed: 0,
            x0: vec![0.0],
            y0: vec![0.0],
            status: "ResConverged".into(),
            stop_rule: Some(1),
            iterations: 10 * (rep + 1),
            x: vec![1.0],
            y: vec![1.0],
            upper_obj: f,
            lower_obj: -f,
            r_upper: Some(f),
            r_lower: Some(-f),
            infease: Some(infease),
            applicable,
            wall_time: 0.1 * (rep + 1) as f64,
            error: None,
        }
    }

    #[test]
    fn median_of_one_is_itself() {
        let rows = summarize(&[rec("a", 0, 2.5, 0.01, true)]);
        let m = rows.iter().find(|r| r.stat == "median").unwrap();
        let b = rows.iter().find(|r| r.stat == "best").unwrap();
        assert_eq!(m.upper_obj, 2.5);
        assert_eq!(m.wall_time, b.wall_time);
        assert_eq!(m.iterations, 10.0);
    }

    #[test]
    fn best_prefers_applicable() {
        let runs = [rec("a", 0, -5.0, 0.5, false), rec("a", 1, 3.0, 0.0, true), rec("a", 2, 1.0, 0.01, true)];
        let refs: Vec<&RunRecord> = runs.iter().collect();
        assert_eq!(best_run(&refs), Some(2));
        let rows = summarize(&runs);
        assert_eq!(rows[0].applicable_count, 2);
        assert_eq!(rows[1].upper_obj, 1.0);
    }

    #[test]
    fn median_even_count() {
        assert_eq!(median([4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median([f64::NAN]).is_nan());
    }

    #[test]
    fn csv_row_matches_header() {
        assert_eq!(rec("a", 0, 1.0, 0.0, true).csv_row().len(), RECORD_HEADER.len());
    }
}

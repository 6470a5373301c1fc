//! `ebsa` command-line harness: single solves, corpus batches and
//! derivative checks, with JSON/CSV reports and plot-ready data files.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 a solve ended without
//! converging, 3 a check failed.

pub mod args;
pub mod check;
pub mod config;
pub mod record;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::Parser;
use ebsa_core::ebsa::SolverConfig;
use ebsa_core::problem::parse_problem_file;
use ebsa_core::{corpus_get, corpus_names, BilevelProblem};
use serde::Serialize;
use thiserror::Error;

use args::{BatchArgs, CheckArgs, Cli, Command, SolveArgs};
use check::{check_problem, format_table, CheckRow};
use record::{converged, run_one, summarize, write_dat, write_records_csv, write_summary_csv, write_trace, RunRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Batch(a) => cmd_batch(&a),
        Command::Check(a) => cmd_check(&a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_USAGE
    })
}

/// A corpus name, or a path to a problem file.
pub fn resolve_problem(arg: &str) -> Result<BilevelProblem, CliError> {
    let path = Path::new(arg);
    if arg.ends_with(".bil") || path.is_file() {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {arg}: {e}")))?;
        return parse_problem_file(&text).map_err(|e| CliError::Usage(format!("{arg}: {e}")));
    }
    corpus_get(arg).map_err(|e| CliError::Usage(e.to_string()))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn trace_path(out: &Path, problem: &str, rep: usize) -> PathBuf {
    out.join(format!("trace_{problem}_{rep}.csv"))
}

#[derive(Serialize)]
struct SolveFile<'a> {
    record: &'a RunRecord,
    config: &'a SolverConfig,
    infease: &'a Option<ebsa_core::metrics::InfeaseBreakdown>,
    report: &'a Option<ebsa_core::ebsa::SolveReport>,
}

/// `solve <problem>`: repetition 0 of `batch` for a single problem.
pub fn cmd_solve(a: &SolveArgs) -> Result<i32, CliError> {
    let prob = resolve_problem(&a.problem)?;
    let cfg = config::build_config(a.run.config.as_deref(), &a.run.params)?;
    make_dir(&a.run.out)?;
    let out = run_one(&prob, &cfg, a.run.seed, 0);
    write_json(
        &a.run.out.join("report.json"),
        &SolveFile {
            record: &out.record,
            config: &cfg,
            infease: &out.infease,
            report: &out.report,
        },
    )?;
    if a.run.trace {
        if let Some(rep) = &out.report {
            write_trace(&trace_path(&a.run.out, prob.name(), 0), rep)?;
        }
    }
    let r = &out.record;
    println!(
        "{}: {} after {} iterations, F = {:.6e}, f = {:.6e}, Infease = {}, {:.3}s",
        r.problem,
        r.status,
        r.iterations,
        r.upper_obj,
        r.lower_obj,
        r.infease.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "n/a".into()),
        r.wall_time
    );
    if let Some(e) = &r.error {
        eprintln!("note: {e}");
    }
    Ok(if converged(&r.status) {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

#[derive(Serialize)]
struct BatchFile<'a> {
    seed: u64,
    reps: usize,
    config: &'a SolverConfig,
    applicable: usize,
    total: usize,
    wall_time: f64,
    records: &'a [RunRecord],
    summary: &'a [record::SummaryRow],
}

/// Runs `jobs` on `workers` threads; results come back in job order.
fn run_parallel<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// `batch`: every (filtered) corpus problem, `reps` seeded starts each.
pub fn cmd_batch(a: &BatchArgs) -> Result<i32, CliError> {
    let cfg = config::build_config(a.run.config.as_deref(), &a.run.params)?;
    let names: Vec<&str> = corpus_names()
        .into_iter()
        .filter(|n| a.filter.as_deref().is_none_or(|f| n.contains(f)))
        .collect();
    if names.is_empty() {
        eprintln!("error: no corpus problem matches the filter");
        return Ok(EXIT_USAGE);
    }
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    make_dir(&a.run.out)?;
    let problems: Vec<BilevelProblem> = names
        .iter()
        .map(|n| corpus_get(n).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..problems.len()).flat_map(|p| (0..a.reps).map(move |r| (p, r))).collect();
    let start = Instant::now();
    let outputs = run_parallel(&jobs, a.workers, |&(p, rep)| run_one(&problems[p], &cfg, a.run.seed, rep));
    let wall = start.elapsed().as_secs_f64();

    if a.run.trace {
        for o in &outputs {
            if let Some(rep) = &o.report {
                write_trace(&trace_path(&a.run.out, &o.record.problem, o.record.rep), rep)?;
            }
        }
    }
    let records: Vec<RunRecord> = outputs.into_iter().map(|o| o.record).collect();
    for r in &records {
        println!(
            "{:16} rep {} {:13} k={:4} F={:+.6e} Infease={} {:.3}s",
            r.problem,
            r.rep,
            r.status,
            r.iterations,
            r.upper_obj,
            r.infease.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "n/a".into()),
            r.wall_time
        );
    }
    let summary = summarize(&records);
    let applicable = records.iter().filter(|r| r.applicable).count();
    write_records_csv(&a.run.out.join("runs.csv"), &records)?;
    write_summary_csv(&a.run.out.join("summary.csv"), &summary)?;
    let best: Vec<&record::SummaryRow> = summary.iter().filter(|s| s.stat == "best").collect();
    write_dat(&a.run.out.join("fig_rF.dat"), best.iter().filter_map(|s| s.r_upper))?;
    write_dat(&a.run.out.join("fig_rf.dat"), best.iter().filter_map(|s| s.r_lower))?;
    write_dat(&a.run.out.join("fig_time.dat"), best.iter().map(|s| s.wall_time))?;
    write_dat(&a.run.out.join("fig_infease.dat"), best.iter().filter_map(|s| s.infease))?;
    write_json(
        &a.run.out.join("report.json"),
        &BatchFile {
            seed: a.run.seed,
            reps: a.reps,
            config: &cfg,
            applicable,
            total: records.len(),
            wall_time: wall,
            records: &records,
            summary: &summary,
        },
    )?;
    println!(
        "applicable: {applicable}/{} runs ({:.1}%), wall time {:.2}s",
        records.len(),
        100.0 * applicable as f64 / records.len() as f64,
        wall
    );
    Ok(EXIT_OK)
}

/// Runs the check suite on explicit problems; returns the exit code and rows.
pub fn run_check(problems: &[BilevelProblem], tol: f64, points: usize, seed: u64) -> (i32, Vec<CheckRow>) {
    let rows: Vec<CheckRow> = problems
        .iter()
        .flat_map(|p| check_problem(p, tol, points, seed))
        .collect();
    let code = if rows.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    };
    (code, rows)
}

/// `check`: derivative and smoothing-calculus validation.
pub fn cmd_check(a: &CheckArgs) -> Result<i32, CliError> {
    if !(a.tol > 0.0) || a.points == 0 {
        return Err(CliError::Usage("--tol must be positive and --points at least 1".into()));
    }
    let targets: Vec<String> = if a.problems.is_empty() {
        corpus_names().into_iter().map(String::from).collect()
    } else {
        a.problems.clone()
    };
    let targets: Vec<String> = targets
        .into_iter()
        .filter(|n| a.filter.as_deref().is_none_or(|f| n.contains(f)))
        .collect();
    if targets.is_empty() {
        return Err(CliError::Usage("no problem matches the filter".into()));
    }
    let problems: Vec<BilevelProblem> = targets.iter().map(|s| resolve_problem(s)).collect::<Result<_, _>>()?;
    let (code, rows) = run_check(&problems, a.tol, a.points, a.seed);
    let failed: Vec<CheckRow> = rows.iter().filter(|r| !r.passed).cloned().collect();
    if failed.is_empty() {
        println!("{} checks over {} problems passed (tol {:e})", rows.len(), problems.len(), a.tol);
    } else {
        print!("{}", format_table(&failed));
        println!("{} of {} checks failed", failed.len(), rows.len());
    }
    Ok(code)
}

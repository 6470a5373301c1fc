use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ebsa", version, about = "Barrier-smoothing solver for bilevel programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one corpus problem (or a problem file) from a seeded start.
    Solve(SolveArgs),
    /// Solve every corpus problem several times and aggregate.
    Batch(BatchArgs),
    /// Check supplied derivatives and the smoothing calculus over the corpus.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Corpus name, or a path to a `.bil` problem file.
    pub problem: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Repetitions per problem.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Parallel workers; output order does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Keep only problems whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Corpus names or `.bil` paths; the whole corpus when empty.
    pub problems: Vec<String>,
    /// Relative tolerance for every comparison.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Random points per problem.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub filter: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flat `key = value` file of solver parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "ebsa_out")]
    pub out: PathBuf,
    /// Also write a per-iteration CSV for every run.
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub params: ParamFlags,
}

/// One flag per solver parameter. Values are kept as text and parsed by
/// `SolverConfig::set`, so flags and config files share one code path.
#[derive(Debug, Default, Args)]
pub struct ParamFlags {
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub r1: Option<String>,
    #[arg(long)]
    pub rho1: Option<String>,
    #[arg(long)]
    pub c1: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub delta0: Option<String>,
    #[arg(long)]
    pub delta1: Option<String>,
    #[arg(long)]
    pub delta2: Option<String>,
    #[arg(long)]
    pub rho_bar: Option<String>,
    #[arg(long)]
    pub gamma1: Option<String>,
    #[arg(long)]
    pub eps1: Option<String>,
    #[arg(long)]
    pub tau1: Option<String>,
    #[arg(long)]
    pub lambda_max: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_min: Option<String>,
    #[arg(long)]
    pub mu_max: Option<String>,
    #[arg(long)]
    pub max_backtracks: Option<String>,
    #[arg(long)]
    pub max_step4_failures: Option<String>,
    #[arg(long)]
    pub res_tol: Option<String>,
    #[arg(long)]
    pub max_outer: Option<String>,
}

impl ParamFlags {
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("eps", &self.eps),
            ("r1", &self.r1),
            ("rho1", &self.rho1),
            ("c1", &self.c1),
            ("beta", &self.beta),
            ("delta0", &self.delta0),
            ("delta1", &self.delta1),
            ("delta2", &self.delta2),
            ("rho_bar", &self.rho_bar),
            ("gamma1", &self.gamma1),
            ("eps1", &self.eps1),
            ("tau1", &self.tau1),
            ("lambda_max", &self.lambda_max),
            ("mu_min", &self.mu_min),
            ("mu_max", &self.mu_max),
            ("max_backtracks", &self.max_backtracks),
            ("max_step4_failures", &self.max_step4_failures),
            ("res_tol", &self.res_tol),
            ("max_outer", &self.max_outer),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

mod commands;
mod io;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes: 0 success, 1 numeric or input failure, 2 usage error.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Numeric(simdiag::Error),
}

impl From<simdiag::Error> for CliError {
    fn from(e: simdiag::Error) -> Self {
        CliError::Numeric(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) | CliError::Numeric(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(e) => write!(f, "numeric failure: {e}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "simdiag",
    version,
    about = "Tests for simultaneous diagonalizability of asymmetric matrices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo size and power of the tests under a synthetic design.
    Simulate(SimulateArgs),
    /// Runs one test on matrix estimates read from CSV.
    Test(TestArgs),
    /// Common-eigenvector analysis of per-subject VAR fits.
    Var(VarArgs),
    /// Common stationary law of several Markov chains.
    Markov(MarkovArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DesignArg {
    TwoSample,
    Multi,
    Partial,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub design: DesignArg,
    #[arg(long)]
    pub d: usize,
    /// Number of matrices (multi and partial designs).
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of shared eigenvectors (partial design).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: usize,
    /// Signal-to-noise ratio, a positive number or `inf`.
    #[arg(long, default_value = "inf")]
    pub snr: String,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Truncation threshold, a non-negative number or `auto` for n^(-1/3).
    #[arg(long, default_value = "auto")]
    pub epsilon: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Commutator,
    Llr,
    Multi,
    Partial,
    Pairwise,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Chi2,
    Gamma,
}

#[derive(Args)]
pub struct TestArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Matrix estimate CSV, or a directory of sample CSVs when its `--cov` is `empirical`.
    #[arg(long = "estimate", required = true)]
    pub estimates: Vec<PathBuf>,
    /// Covariance CSV of vec(A) (d^2 x d^2), or `empirical`; one per estimate.
    #[arg(long = "cov", required = true)]
    pub covs: Vec<String>,
    /// Sample size behind each estimate; a single value applies to all.
    #[arg(long = "n")]
    pub ns: Vec<usize>,
    /// Reference matrices whose power bases span the LLR subspaces.
    #[arg(long = "reference")]
    pub references: Vec<PathBuf>,
    /// Common eigenvector matrix for `multi`; fitted when omitted.
    #[arg(long)]
    pub v: Option<PathBuf>,
    /// Orthogonal basis for `partial`; fitted with `--v-tilde` when omitted.
    #[arg(long)]
    pub q: Option<PathBuf>,
    #[arg(long)]
    pub v_tilde: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "chi2")]
    pub variant: VariantArg,
    #[arg(long, default_value = "auto")]
    pub epsilon: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VarArgs {
    /// Per-subject series CSV, one row per time point.
    #[arg(long = "series", required = true)]
    pub series: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub order: usize,
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, default_value = "auto")]
    pub epsilon: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for the decoupled series, written only when the test does not reject.
    #[arg(long)]
    pub decoupled_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct MarkovArgs {
    /// Per-chain file: labels 1..d, or numeric values when `--bins` is given.
    #[arg(long = "chain", required = true)]
    pub chains: Vec<PathBuf>,
    /// Number of states; defaults to the largest label.
    #[arg(long)]
    pub d: Option<usize>,
    /// Probability levels, e.g. `0.25,0.75`, of the pooled values used as state thresholds.
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<f64>>,
    #[arg(long, default_value = "auto")]
    pub epsilon: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SIMDIAG_THREADS") else {
        return Ok(());
    };
    let n: usize =
        raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Usage(format!("SIMDIAG_THREADS must be a positive integer, got `{raw}`"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Test(a) => commands::test(&a),
        Command::Var(a) => commands::var(&a),
        Command::Markov(a) => commands::markov(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("simdiag: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

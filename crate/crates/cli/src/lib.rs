//! Command-line front end: simulate panels, fit and decode models, run
//! model selection, summarise recovery across seeds and rotate loadings.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 when
//! the numerics fail.

pub mod commands;
pub mod data;
pub mod files;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<ehmfm::Error> for CliError {
    fn from(e: ehmfm::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ehmfm", version, about = "Exploratory hidden Markov factor models for panel data")]
pub struct Cli {
    /// Worker threads for subject- and seed-level parallelism.
    #[arg(long, global = true, env = "EHMFM_WORKERS")]
    pub workers: Option<usize>,
    /// Log progress (-v) or per-iteration detail (-vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated panel and its ground truth.
    Simulate(SimulateArgs),
    /// Fit one (J, K) model.
    Fit(FitArgs),
    /// Posterior-mode states under saved parameters.
    Decode(DecodeArgs),
    /// Fit a grid of (J, K) and pick winners by AIC and BIC.
    Select(SelectArgs),
    /// Recovery metrics of fits against simulation truth, aggregated over seeds.
    Report(ReportArgs),
    /// Promax-rotated, standardized loadings.
    Rotate(RotateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario name; see --list.
    #[arg(long, required_unless_present = "list")]
    pub scenario: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Override the scenario's subject count.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Output directory for panel.csv and truth.json.
    #[arg(long, required_unless_present = "list")]
    pub out: Option<PathBuf>,
    /// Print the scenario names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Panel CSV: subject_id,time,y_1..y_p,x_1..x_d.
    #[arg(long)]
    pub data: PathBuf,
    /// Prepend an intercept covariate.
    #[arg(long)]
    pub add_intercept: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// Transition model: dt or ct.
    #[arg(long, default_value = "dt")]
    pub mode: String,
    /// Log-likelihood change tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol_loglik: f64,
    /// Mean absolute parameter change tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol_params: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Stop when either tolerance is met instead of both.
    #[arg(long)]
    pub stop_on_either: bool,
    /// Matrix exponential: `pade` or `uniform:<a>` with a a power of two.
    #[arg(long, default_value = "pade")]
    pub expm: String,
    /// Mixture restarts during initialization.
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Allow the continuous-time engine on unit-spaced panels.
    #[arg(long)]
    pub force_ct: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Number of hidden states.
    #[arg(short = 'J', long = "states", alias = "J")]
    pub states: usize,
    /// Number of factors per state.
    #[arg(short = 'K', long = "factors", alias = "K")]
    pub factors: usize,
    /// Initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plain Newton / Fisher scoring steps without damping.
    #[arg(long)]
    pub no_stabilize: bool,
    /// Parameter JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write decoded states as CSV.
    #[arg(long)]
    pub states_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Parameter JSON from `fit`.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value = "pade")]
    pub expm: String,
    /// CSV output: subject_id,time,state.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// State counts, e.g. `2..4` or `2,3,4`.
    #[arg(short = 'J', long = "states", alias = "J", default_value = "2..4")]
    pub states: String,
    /// Factor counts, e.g. `2..4`.
    #[arg(short = 'K', long = "factors", alias = "K", default_value = "2..4")]
    pub factors: String,
    /// Initialization seeds per candidate; the best log-likelihood is kept.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Plain Newton / Fisher scoring steps without damping.
    #[arg(long)]
    pub no_stabilize: bool,
    /// Directory for selection.csv, selection.json and complexity.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of fits. Without --truth, every subdirectory holding
    /// params.json and truth.json is one replicate.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// One truth file shared by every fit JSON in --in.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Compare loadings without the per-state orthogonal rotation.
    #[arg(long)]
    pub no_procrustes: bool,
    /// Row label for the summary tables.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RotateArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Promax exponent.
    #[arg(long, default_value_t = 4.0)]
    pub power: f64,
    /// Only this state (1-based).
    #[arg(long)]
    pub state: Option<usize>,
    /// CSV output: state,feature,factor,loading,salient.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `3`, `2..4` (inclusive) or `2,3,4`.
pub fn parse_range(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Validation(format!("cannot parse range `{s}`"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_expm(s: &str) -> Result<ehmfm::ExpmMethod, CliError> {
    match s {
        "pade" => Ok(ehmfm::ExpmMethod::PadeScalingSquaring),
        _ => {
            let a = s
                .strip_prefix("uniform:")
                .and_then(|a| a.parse::<u32>().ok())
                .ok_or_else(|| CliError::Validation(format!("unknown --expm `{s}`; use `pade` or `uniform:<a>`")))?;
            ehmfm::ExpmMethod::uniform_power(a).map_err(CliError::from)
        }
    }
}

/// Runs one parsed command, writing human-readable progress to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Validation("--workers must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a, out),
        Command::Fit(a) => commands::fit(&a, out),
        Command::Decode(a) => commands::decode(&a, out),
        Command::Select(a) => commands::select(&a, out),
        Command::Report(a) => commands::report(&a, out),
        Command::Rotate(a) => commands::rotate(&a, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("2..4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_range("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_range("3, 5").unwrap(), vec![3, 5]);
        assert!(parse_range("4..2").is_err());
        assert!(parse_range("0").is_err());
    }

    #[test]
    fn expm_flag() {
        assert!(parse_expm("pade").is_ok());
        assert_eq!(parse_expm("uniform:64").unwrap(), ehmfm::ExpmMethod::UniformPower { power: 64 });
        assert!(parse_expm("uniform:3").is_err());
        assert!(parse_expm("taylor").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(ehmfm::Error::InvalidData("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(ehmfm::Error::Singular("x".into())).exit_code(), 3);
    }
}

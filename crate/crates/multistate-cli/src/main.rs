//! `mstate`: fit transition models and predict multi-state quantities.
//!
//! The workflow mirrors the analysis pipeline: fit the population expected
//! rate, reshape the cohort into stacked format, fit the excess and
//! mortality transitions, then predict by simulation.

mod commands;
mod parse;
mod synth;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit codes: 1 generic/IO, 2 data/schema, 3 convergence, 4 configuration.
pub const EXIT_IO: u8 = 1;
pub const EXIT_SCHEMA: u8 = 2;
pub const EXIT_CONVERGENCE: u8 = 3;
pub const EXIT_CONFIG: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_SCHEMA,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<multistate::expected::ExpectedError> for CliError {
    fn from(e: multistate::expected::ExpectedError) -> Self {
        use multistate::expected::ExpectedError::*;
        let code = match &e {
            Fit(_) => EXIT_CONVERGENCE,
            MissingMapping(_) | CovariateLength { .. } => EXIT_CONFIG,
            _ => EXIT_SCHEMA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<multistate::survival::SurvivalError> for CliError {
    fn from(e: multistate::survival::SurvivalError) -> Self {
        use multistate::survival::SurvivalError::*;
        let code = match &e {
            Fit(_) | IndefiniteVcov | Inversion(_) => EXIT_CONVERGENCE,
            MissingCovariate(_) => EXIT_CONFIG,
            _ => EXIT_SCHEMA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<multistate::msm::MsmError> for CliError {
    fn from(e: multistate::msm::MsmError) -> Self {
        CliError {
            code: EXIT_SCHEMA,
            message: e.to_string(),
        }
    }
}

impl From<multistate::sim::SimError> for CliError {
    fn from(e: multistate::sim::SimError) -> Self {
        use multistate::sim::SimError::*;
        let code = match &e {
            Survival(inner) => return CliError::from_survival_in_sim(inner),
            Expected(_) | Msm(_) => EXIT_SCHEMA,
            EmptySample => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl CliError {
    fn from_survival_in_sim(e: &multistate::survival::SurvivalError) -> Self {
        CliError {
            code: EXIT_CONVERGENCE,
            message: e.to_string(),
        }
    }
}

impl From<multistate::files::FileError> for CliError {
    fn from(e: multistate::files::FileError) -> Self {
        CliError {
            code: EXIT_SCHEMA,
            message: e.to_string(),
        }
    }
}

impl From<multistate::spline::SplineError> for CliError {
    fn from(e: multistate::spline::SplineError) -> Self {
        CliError {
            code: EXIT_SCHEMA,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "mstate", version, about = "Multi-state excess-hazard modeling")]
struct Cli {
    /// Worker threads for simulation (default: machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and population rate table with known
    /// hazards, so every command here is runnable end to end.
    GenData(GenDataArgs),
    /// Fit the population expected-rate model (Poisson, two timescales).
    FitExpected(FitExpectedArgs),
    /// Reshape a wide cohort file into stacked (long) format.
    Msset(MssetArgs),
    /// Fit one flexible parametric transition model from a long file.
    FitTransition(FitTransitionArgs),
    /// Simulate the fitted model set and write prediction CSVs.
    Predict(Box<PredictArgs>),
    /// Refit transitions over a grid of spline dimensions and write one
    /// probability prediction file per combination.
    Sweep(Box<SweepArgs>),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub patients: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct FitExpectedArgs {
    /// Rate table: columns year sex age d y.
    #[arg(long)]
    pub rates: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub df_age: usize,
    #[arg(long, default_value_t = 5)]
    pub df_year: usize,
    /// Build the age spline on the log scale.
    #[arg(long, default_value_t = true)]
    pub log_age: bool,
    /// Stratification covariates present in the table (e.g. sex).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long, default_value_t = false)]
    pub orthogonalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct MssetArgs {
    /// Wide cohort file: id ill ill_time dead death_time + covariates.
    #[arg(long)]
    pub wide: PathBuf,
    /// Minimum interval between events, in days.
    #[arg(long, default_value_t = 1.0)]
    pub min_interval_days: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FitTransitionArgs {
    /// Long (stacked) file from msset.
    #[arg(long)]
    pub long: PathBuf,
    /// 1-based transition index whose rows to fit.
    #[arg(long)]
    pub trans: usize,
    #[arg(long, value_parser = ["all-cause", "excess"])]
    pub kind: String,
    #[arg(long, value_parser = ["forward", "reset"])]
    pub clock: String,
    /// Baseline spline dimension.
    #[arg(long)]
    pub df: usize,
    /// Covariate terms, e.g. "sex,rcs(c0,5),rcs(a0,5,log)".
    #[arg(long, default_value = "")]
    pub covariates: String,
    /// Expected-rate model file; required for kind=excess (the expected
    /// rate is attached to the rows before fitting).
    #[arg(long)]
    pub expected: Option<PathBuf>,
    /// Covariate mapping expected-model-name=long-column, comma separated.
    #[arg(long, default_value = "")]
    pub map: String,
    #[arg(long, default_value_t = false)]
    pub orthogonalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub expected: Option<PathBuf>,
    #[arg(long)]
    pub excess: Option<PathBuf>,
    #[arg(long)]
    pub death: Option<PathBuf>,
    /// Shared post-illness mortality model (slots for both partition
    /// components).
    #[arg(long)]
    pub post_death: Option<PathBuf>,
    /// Covariate pattern, e.g. "sex=0,a0=30,c0=1995".
    #[arg(long)]
    pub at: Option<String>,
    /// Second pattern for difference/ratio quantities.
    #[arg(long)]
    pub at2: Option<String>,
    /// Comma-separated: probability, difference, ratio, proportion-excess,
    /// los, ever-visit.
    #[arg(long)]
    pub quantities: Option<String>,
    /// Proportion-excess mode: current or ever.
    #[arg(long)]
    pub mode: Option<String>,
    /// Time grid start:stop:points.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Subjects for the point estimate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulation seed (required, for reproducibility).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<String>,
    /// Compute parametric-bootstrap confidence intervals.
    #[arg(long, default_value_t = false)]
    pub ci: bool,
    #[arg(long)]
    pub n_ci: Option<usize>,
    #[arg(long)]
    pub m_reps: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Merge the partition components in probability output.
    #[arg(long, default_value_t = false)]
    pub merge_illness: bool,
    /// Also dump the raw point-run trajectories for the first pattern
    /// (columns subject seq state entry_time). Large at high n.
    #[arg(long)]
    pub dump_trajectories: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub long: PathBuf,
    #[arg(long)]
    pub expected: PathBuf,
    /// Degrees-of-freedom range lo:hi for the excess transition.
    #[arg(long, default_value = "3:5")]
    pub df2: String,
    /// Range for pre-illness mortality.
    #[arg(long, default_value = "3:5")]
    pub df3: String,
    /// Range for post-illness mortality.
    #[arg(long, default_value = "3:4")]
    pub df4: String,
    #[arg(long, default_value = "")]
    pub covariates: String,
    #[arg(long, default_value = "")]
    pub map: String,
    #[arg(long)]
    pub at: String,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 15.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("mstate: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::FitExpected(args) => commands::fit_expected(&args),
        Command::Msset(args) => commands::msset(&args),
        Command::FitTransition(args) => commands::fit_transition(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::Sweep(args) => commands::sweep(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mstate: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

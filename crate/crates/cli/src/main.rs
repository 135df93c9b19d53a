//! `zest`: signal and noise level estimation from the command line.

mod artifact;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use zest_core::bootstrap::Resampling;
use zest_core::simgen::{EstimatorSpec, InitialKind, ZeroKind};
use zest_core::VarSource;

#[derive(Debug, Parser)]
#[command(name = "zest", version, about = "Zero-estimator corrections for signal and noise level estimation")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; the output does not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Artifact format.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub output: OutputFormat,

    /// Write the artifact here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Suppress notes on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo scenario from a JSON config.
    Simulate(SimulateArgs),
    /// Estimate tau^2 and sigma^2 on a labeled CSV.
    Estimate(EstimateArgs),
    /// Bootstrap correction of an arbitrary initial estimator.
    Improve(ImproveArgs),
    /// Prune collinear columns, add interactions, estimate covariate moments.
    Preprocess(PreprocessArgs),
    /// Repeated subsampling of a dataset against its full-data tau^2.
    Realbench(RealbenchArgs),
    /// Correlations between initial estimators and zero-estimators.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config, or an artifact whose header carries one.
    #[arg(long)]
    pub config: PathBuf,

    /// Also write per-replicate values as CSV.
    #[arg(long)]
    pub replicates: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Labeled CSV.
    #[arg(long)]
    pub data: PathBuf,

    /// Response column: header name, or zero-based position.
    #[arg(long, default_value = "y")]
    pub response: String,

    /// The CSV has no header row.
    #[arg(long)]
    pub no_header: bool,

    /// Keep the response uncentered.
    #[arg(long)]
    pub no_center: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct MomentArgs {
    /// Unlabeled covariate CSV; moments are estimated from it.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,

    /// Covariate model JSON (as written by `preprocess --moments-out`).
    #[arg(long)]
    pub moments: Option<PathBuf>,

    /// Covariates are already standardized (mean 0, identity covariance).
    #[arg(long)]
    pub standardized: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MomentOptions {
    /// Banded covariance estimate for `--unlabeled`.
    #[arg(long)]
    pub bandwidth: Option<usize>,

    /// How the variance of the zero-estimator is obtained.
    #[arg(long, value_enum, default_value_t = VarSourceArg::Analytic)]
    pub var_source: VarSourceArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarSourceArg {
    /// Independent standardized covariates.
    Analytic,
    /// Sample variance over the whitened unlabeled rows.
    Empirical,
}

impl From<VarSourceArg> for VarSource {
    fn from(v: VarSourceArg) -> Self {
        match v {
            VarSourceArg::Analytic => VarSource::AnalyticIndependent,
            VarSourceArg::Empirical => VarSource::EmpiricalUnlabeled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingArg {
    WithReplacement,
    HalfSample,
}

impl From<ResamplingArg> for Resampling {
    fn from(v: ResamplingArg) -> Self {
        match v {
            ResamplingArg::WithReplacement => Resampling::WithReplacement,
            ResamplingArg::HalfSample => Resampling::HalfSample,
        }
    }
}

fn parse_from_str<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub moments: MomentArgs,

    #[command(flatten)]
    pub options: MomentOptions,

    /// Comma-separated estimators.
    #[arg(long, value_delimiter = ',', default_value = "naive,single,selection", value_parser = parse_from_str::<EstimatorSpec>)]
    pub estimator: Vec<EstimatorSpec>,
}

#[derive(Debug, Args, Serialize)]
pub struct ImproveArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub moments: MomentArgs,

    #[command(flatten)]
    pub options: MomentOptions,

    /// naive, dicker, ridge, constant:<value> or cmd:<command line>. A
    /// command reads the dataset as CSV on stdin and prints one number.
    #[arg(long, default_value = "naive")]
    pub initial: String,

    /// Bootstrap replications.
    #[arg(long, default_value_t = 100)]
    pub m: usize,

    /// all, gap, or comma-separated zero-based column indices.
    #[arg(long, default_value = "all")]
    pub selection: String,

    #[arg(long, value_enum, default_value_t = ResamplingArg::WithReplacement)]
    pub resampling: ResamplingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// Labeled CSV to transform.
    #[arg(long, requires = "data_out")]
    pub data: Option<PathBuf>,

    #[arg(long, default_value = "y")]
    pub response: String,

    #[arg(long)]
    pub no_header: bool,

    /// Where the transformed dataset goes.
    #[arg(long)]
    pub data_out: Option<PathBuf>,

    /// Pairwise interactions: `all`, or `top:K` for the K covariates with the
    /// largest OLS t-values.
    #[arg(long)]
    pub interactions: Option<String>,

    /// Relative tolerance for dropping collinear columns (after interactions).
    #[arg(long)]
    pub drop_collinear: Option<f64>,

    /// Unlabeled covariate CSV whose moments are estimated.
    #[arg(long, requires = "moments_out")]
    pub unlabeled: Option<PathBuf>,

    #[arg(long)]
    pub unlabeled_no_header: bool,

    #[arg(long)]
    pub bandwidth: Option<usize>,

    /// Where the covariate model JSON goes.
    #[arg(long)]
    pub moments_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct SourceArgs {
    /// Labeled CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Use a generated stand-in dataset with this many rows (p = 200,
    /// tau^2 = 2, eta = 0.5).
    #[arg(long)]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct RealbenchArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    #[arg(long, default_value = "y")]
    pub response: String,

    #[arg(long)]
    pub no_header: bool,

    /// Labeled subsample size.
    #[arg(long)]
    pub n_sub: usize,

    #[arg(long, default_value_t = 100)]
    pub reps: usize,

    #[arg(long, value_delimiter = ',', default_value = "naive,single,selection", value_parser = parse_from_str::<EstimatorSpec>)]
    pub estimator: Vec<EstimatorSpec>,

    #[command(flatten)]
    pub options: MomentOptions,

    #[arg(long)]
    pub no_center: bool,

    #[arg(long, default_value_t = 100)]
    pub bootstrap_m: usize,

    #[arg(long, value_enum, default_value_t = ResamplingArg::WithReplacement)]
    pub resampling: ResamplingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct CorrelateArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    #[arg(long, default_value = "y")]
    pub response: String,

    #[arg(long)]
    pub no_header: bool,

    #[arg(long)]
    pub n_sub: usize,

    /// Subsamples; at least 10.
    #[arg(long, default_value_t = 300)]
    pub reps: usize,

    #[arg(long, value_delimiter = ',', default_value = "naive,dicker", value_parser = parse_from_str::<InitialKind>)]
    pub initial: Vec<InitialKind>,

    #[arg(long, value_delimiter = ',', default_value = "single,selection", value_parser = parse_from_str::<ZeroKind>)]
    pub zero: Vec<ZeroKind>,

    #[arg(long)]
    pub bandwidth: Option<usize>,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments: exit 2.
    Config(anyhow::Error),
    /// Anything that went wrong while running: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

/// Parameter errors from the library are configuration errors.
impl From<zest_core::Error> for Failure {
    fn from(e: zest_core::Error) -> Self {
        match e {
            zest_core::Error::InvalidParameter { .. } => Failure::Config(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<zest_core::Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| commands::run(&cli)),
        Err(e) => Err(Failure::Runtime(e.into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

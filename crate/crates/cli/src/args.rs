use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

fn existing_file(raw: &str) -> Result<PathBuf, String> {
    let path = PathBuf::from(raw);
    if path.is_file() {
        Ok(path)
    } else {
        Err(format!("no such file: {raw}"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mreb",
    version,
    about = "Causal-effect estimation with invalid instruments"
)]
pub struct Cli {
    /// Flat `key = value` file with prior, MCEM and scenario settings.
    #[arg(long, global = true, value_parser = existing_file)]
    pub config: Option<PathBuf>,

    /// Overrides the `seed` key of the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (default: $MREB_OUTPUT_DIR, else the current directory).
    #[arg(long, global = true, env = "MREB_OUTPUT_DIR")]
    pub output: Option<PathBuf>,

    /// Worker threads for the simulation grid. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an estimator to individual-level data (`z1..zJ,d,y`).
    Estimate(EstimateArgs),
    /// Fit MR-EB to summary statistics (`gamma2,omega,sigma2_omega`).
    EstimateSummary(SummaryArgs),
    /// Draw one dataset from the simulation model.
    Simulate(SimulateArgs),
    /// Replicated MSE over a scenario grid.
    Grid(GridArgs),
    /// Iid draws of a direct effect from the spike/slab prior.
    PriorSample(PriorSampleArgs),
    /// Posterior modes and error-bound constants at fixed variance components.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct TraceFlags {
    /// Also write the per-iteration MCEM trace.
    #[arg(long)]
    pub trace: bool,
    /// Also write every retained Gibbs draw.
    #[arg(long)]
    pub chain_trace: bool,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, value_parser = existing_file)]
    pub input: PathBuf,
    /// tsls, single or mr-eb.
    #[arg(long, default_value = "mr-eb")]
    pub estimator: String,
    #[command(flatten)]
    pub trace: TraceFlags,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    #[arg(long, value_parser = existing_file)]
    pub input: PathBuf,
    #[command(flatten)]
    pub trace: TraceFlags,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_alpha: Option<f64>,
    #[arg(long)]
    pub p0: Option<f64>,
    /// Direct effects scale with instrument strength.
    #[arg(long)]
    pub inside_violated: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Grid spec: scenario keys take comma-separated lists.
    #[arg(long, value_parser = existing_file)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    /// Comma-separated subset of tsls, single, mr-eb.
    #[arg(long, default_value = "tsls,single,mr-eb")]
    pub estimators: String,
}

#[derive(Debug, Args)]
pub struct PriorSampleArgs {
    #[arg(long)]
    pub p0: f64,
    #[arg(long)]
    pub tau2: f64,
    #[arg(long, default_value_t = 0.001)]
    pub nu0: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_alpha: f64,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_parser = existing_file)]
    pub input: PathBuf,
    #[arg(long)]
    pub tau2: f64,
    #[arg(long)]
    pub sigma2_eta: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub mu_alpha: f64,
    /// Indicators for the mixture prior, e.g. `1,0,0,1`.
    #[arg(long)]
    pub xi: Option<String>,
    /// Truth file written by `simulate`; enables the bound terms.
    #[arg(long, value_parser = existing_file)]
    pub truth: Option<PathBuf>,
}

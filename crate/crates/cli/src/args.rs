use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "deconflow",
    version,
    about = "Causal effect estimation with a causally ordered normalizing flow"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic scenario and a dataset from it.
    Simulate(SimulateArgs),
    /// Fit a flow to a CSV whose last column is the effect.
    Train(TrainArgs),
    /// Estimate E[Y | do(X = x)] with a trained checkpoint.
    Adjust(AdjustArgs),
    /// Score interventional estimates against a scenario's ground truth.
    Eval(EvalArgs),
    /// Run a grid of scenarios and seeds into a ledger.
    Sweep(SweepArgs),
    /// Summarize a sweep ledger and write plot data.
    Report(ReportArgs),
    /// Compare naive, controlled and adjusted slopes on named columns.
    Tabular(TabularArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML file with any of the fields printed as the resolved config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Existing directory for data.csv, labels.csv and scenario.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k_l: Option<usize>,
    #[arg(long)]
    pub k_q: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Target mutual information between the confounders, in nats.
    #[arg(long)]
    pub mi: Option<f64>,
    /// Identity mechanisms (needs --n 1).
    #[arg(long)]
    pub linear: bool,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training overrides shared by `train` and `tabular`.
#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Base mixture components.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// One triangular linear layer instead of coupling blocks.
    #[arg(long, conflicts_with_all = ["blocks", "hidden"])]
    pub linear: bool,
    /// Number of coupling blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Hidden widths of the coupling networks, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Tie the base mixture to a KLxKQ grid, e.g. 2x2.
    #[arg(long, value_name = "KLxKQ")]
    pub tied: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Existing directory for checkpoint.json and trainlog.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct AdjustArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// The training data; its effect latents form the resampling pool.
    #[arg(long)]
    pub data: PathBuf,
    /// CSV of query points (cause columns first). Defaults to the data rows.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output CSV of estimates.
    #[arg(long)]
    pub out: PathBuf,
    /// Also regress the estimates on the queries and write the slopes here.
    #[arg(long)]
    pub slopes: Option<PathBuf>,
    /// Resamples per query.
    #[arg(long)]
    pub n_p: Option<usize>,
    #[arg(long, value_parser = ["with_replacement", "without_replacement", "base_marginal"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV from `adjust`.
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Observed data; enables the conditional-mean baseline.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// One-row summary CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-query CSV with the true effect next to each estimate.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub oracle_draws: Option<usize>,
    /// Kernel bandwidths, comma separated (Silverman's rule if absent).
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML sweep config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// Concurrent cells. Falls back to the config, then DECONFLOW_WORKERS.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Existing directory for mi_vs_rmse.csv and slopes.csv.
    #[arg(long)]
    pub plots: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ledger: PathBuf,
    /// Existing directory for summary.csv, mi_vs_rmse.csv and slopes.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TabularArgs {
    /// TOML tabular config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output comparison CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub causes: Option<Vec<String>>,
    /// Observed confounder columns for the controlled regression.
    #[arg(long, value_delimiter = ',')]
    pub confounders: Option<Vec<String>>,
    #[arg(long)]
    pub target: Option<String>,
    /// Causes to jitter. Defaults to every integer-valued cause.
    #[arg(long, value_delimiter = ',')]
    pub ordinal: Option<Vec<String>>,
    #[arg(long)]
    pub jitter_amplitude: Option<f64>,
    #[arg(long)]
    pub jitter_seed: Option<u64>,
    #[arg(long)]
    pub n_p: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

//! `mdm`: batch driver for data generation, training, sampling, evaluation,
//! variational bounds and watermark workflows.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Problems with the request itself rather than with running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Raised by `watermark detect` when some row lacks the mark.
#[derive(Debug)]
pub struct DetectionFailed(pub usize);

impl std::fmt::Display for DetectionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} sample(s) failed detection", self.0)
    }
}

impl std::error::Error for DetectionFailed {}

#[derive(Parser, Debug)]
#[command(name = "mdm", version, about = "Mirror diffusion models on constrained sets")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset as CSV plus sidecar JSON.
    GenData(GenDataArgs),
    /// Train a dual-space noise predictor and write a checkpoint.
    Train(TrainArgs),
    /// Sample from a checkpoint and map the samples into the constraint set.
    Sample(SampleArgs),
    /// Compare two sample sets with distributional metrics.
    Eval(EvalArgs),
    /// Per-sample variational bound on the negative log-likelihood.
    Elbo(ElboArgs),
    /// Watermark key generation, embedding, detection and false-positive rates.
    #[command(subcommand)]
    Watermark(WatermarkCommand),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKindArg {
    GmmBall,
    SpiralBall,
    Dirichlet,
    HypercubeCorners,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Reject,
    Reflect,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: Option<DatasetKindArg>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dirichlet concentrations, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    #[arg(long)]
    pub variance: Option<f64>,
    #[arg(long)]
    pub radius_sq: Option<f64>,
    /// Spiral jitter.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Primal training samples (CSV with sidecar).
    #[arg(long)]
    pub data: PathBuf,
    /// Constraint JSON; defaults to the one recorded in the data sidecar.
    #[arg(long)]
    pub constraint: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub n_res_blocks: Option<usize>,
    /// Diffusion steps T.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Also write checkpoints at these steps, as `<out>/step-<k>`.
    #[arg(long, value_delimiter = ',')]
    pub snapshot_steps: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Generated samples; alternatively use --checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub a: Option<PathBuf>,
    /// Draw fresh samples from this checkpoint for every trial.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reference samples.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub constraint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub projections: Option<usize>,
    /// Skip the Wasserstein-1 estimate.
    #[arg(long)]
    pub no_w1: bool,
    /// Write 2-d histograms of both sample sets with this many bins per axis.
    #[arg(long)]
    pub hist_bins: Option<usize>,
    /// Histogram CSV path; requires --hist-bins.
    #[arg(long)]
    pub hist_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    ForwardChain,
    Independent,
}

#[derive(Args, Debug)]
pub struct ElboArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Primal points, one per row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub n_mc: usize,
    #[arg(long, value_enum, default_value_t = EstimatorArg::ForwardChain)]
    pub estimator: EstimatorArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum WatermarkCommand {
    /// Generate a key of `m` orthonormal tokens in `R^d`.
    Keygen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project samples onto the key polytope.
    Embed {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check samples for the mark; exits 1 when any row fails.
    Detect {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-row results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic and Monte Carlo false-positive rate under Gaussian inputs.
    FpRate {
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MDM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("MDM_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            anyhow::bail!(UsageError("MDM_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("configuring thread pool: {e}"))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use mdm_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<DetectionFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::InvalidConfig(_)
            | E::InvalidDataset(_)
            | E::InvalidConstraint(_)
            | E::InvalidArchitecture(_)
            | E::InvalidSchedule(_)
            | E::DimensionMismatch { .. }
            | E::OddDimension(_),
        ) => 2,
        _ => 1,
    }
}

/// Context chain joined by `: `, skipping causes already quoted by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", render(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

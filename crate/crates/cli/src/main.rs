mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Sparse-representation KV cache compression toolchain.
///
/// Exit codes: 0 success, 1 other failure (or a failed ablation), 2 invalid spec or config,
/// 3 unreadable capture, 4 plan/capture mismatch, 5 index-space overflow, 6 schema mismatch.
#[derive(Parser, Debug)]
#[command(name = "csr", version, about, long_about)]
struct Cli {
    /// Worker threads (default: available parallelism)
    #[arg(long, global = true, env = "CSR_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic capture file
    Synth(SynthArgs),
    /// Group layers by distribution divergence
    MergePlan(MergePlanArgs),
    /// Train offline dictionaries for each merged group, head and chunk
    Train(TrainArgs),
    /// Compress a capture into a cache snapshot and a memory report
    Compress(CompressArgs),
    /// Measure reconstruction, attention and footprint
    Eval(EvalArgs),
    /// Run the directional ablation suite
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Planted,
    Mixture,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Key,
    Value,
}

impl From<KindArg> for csr_core::CacheKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Key => csr_core::CacheKind::Key,
            KindArg::Value => csr_core::CacheKind::Value,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output capture file
    #[arg(long)]
    pub out: PathBuf,
    /// SyntheticSpec JSON to start from; flags override its fields
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorKind>,
    #[arg(long)]
    pub layers: Option<u32>,
    #[arg(long)]
    pub heads: Option<u32>,
    #[arg(long)]
    pub head_dim: Option<u32>,
    /// Vectors per (layer, head)
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Planted atoms per lane
    #[arg(long)]
    pub atoms: Option<usize>,
    /// Planted atoms per vector
    #[arg(long)]
    pub sparsity: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Mixture components
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    /// Per-layer rotation, in [0, 1]
    #[arg(long)]
    pub drift_rate: Option<f64>,
    /// First layer drawn from fresh centres
    #[arg(long)]
    pub break_layer: Option<u32>,
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// RunConfig JSON; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MergePlanArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Output plan JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Maximum pairwise divergence within a group
    #[arg(long)]
    pub delta1: Option<f64>,
    /// Maximum sum of consecutive divergences within a group
    #[arg(long)]
    pub delta2: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Maximum vectors sampled per layer
    #[arg(long)]
    pub sample_cap: Option<usize>,
    /// Average per-head divergences instead of pooling heads
    #[arg(long)]
    pub per_head: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Merge plan JSON (default: every layer on its own)
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Atoms per head and chunk
    #[arg(long)]
    pub atoms: Option<usize>,
    #[arg(long)]
    pub s_train: Option<usize>,
    #[arg(long)]
    pub sn: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Upper bound on the diversity weight; 0 disables the diversity term
    #[arg(long)]
    pub beta_cap: Option<f64>,
    /// One dictionary per group shared by all heads
    #[arg(long)]
    pub head_shared: bool,
}

#[derive(Args, Debug)]
pub struct CodecArgs {
    /// MP-level
    #[arg(long)]
    pub s: Option<usize>,
    /// Channel chunks (default: the dictionary's)
    #[arg(long)]
    pub sn: Option<usize>,
    /// Online atoms per (layer, head, chunk)
    #[arg(long)]
    pub online_size: Option<usize>,
    /// Store vectors raw when the relative residual exceeds 0.99
    #[arg(long)]
    pub outliers: bool,
    /// Store vectors raw when the relative residual exceeds this value
    #[arg(long)]
    pub outlier_threshold: Option<f32>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[command(flatten)]
    pub codec: CodecArgs,
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Offline dictionary (CSRD)
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[command(flatten)]
    pub codec: CodecArgs,
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Offline dictionary (CSRD)
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Cache snapshot to decode instead of sweeping the capture
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated MP-levels
    #[arg(long, value_delimiter = ',')]
    pub sweep_s: Option<Vec<usize>>,
    /// Also measure attention-output fidelity
    #[arg(long)]
    pub attention: bool,
    /// Causal attention proxy
    #[arg(long)]
    pub causal: bool,
    #[arg(long)]
    pub max_queries: Option<usize>,
    /// Comma-separated sequence lengths for the footprint curve
    #[arg(long, value_delimiter = ',')]
    pub footprint_lengths: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::MergePlan(a) => commands::merge_plan(a),
        Command::Train(a) => commands::train(a),
        Command::Compress(a) => commands::compress(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

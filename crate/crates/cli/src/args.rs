use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qwha_core::init::Strategy;
use qwha_core::synth::SynthKind;
use qwha_core::TransformKind;

#[derive(Debug, Parser)]
#[command(name = "qwha", version, about = "Quantization-aware sparse Walsh-Hadamard adapters")]
pub struct Cli {
    /// Worker threads for the parallel kernels (defaults to all cores).
    #[arg(long, global = true, env = "QWHA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic weight matrix and activations.
    Synth(SynthArgs),
    /// Quantize a weight matrix and write its quantization error.
    Quantize(QuantizeArgs),
    /// Build the calibration factor R from activation batches.
    Calibrate(CalibrateArgs),
    /// Initialize a sparse adapter from a quantization error.
    Init(InitArgs),
    /// Measure an initialized adapter.
    Eval(EvalArgs),
    /// Run a strategy × kernel grid on one layer.
    Compare(CompareArgs),
    /// quantize → calibrate → init → eval in one go.
    Pipeline(PipelineArgs),
    /// Time fast transforms against dense matrix-vector products.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKindArg {
    Gaussian,
    HeavyTailedSpikes,
}

impl From<SynthKindArg> for SynthKind {
    fn from(k: SynthKindArg) -> Self {
        match k {
            SynthKindArg::Gaussian => SynthKind::Gaussian,
            SynthKindArg::HeavyTailedSpikes => SynthKind::HeavyTailedSpikes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Adaalloc,
    Random,
    Magnitude,
    Ssh,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Adaalloc => Strategy::AdaAlloc,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Magnitude => Strategy::Magnitude,
            StrategyArg::Ssh => Strategy::SshHalfHalf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Wht,
    Dct,
    Dht,
}

impl From<KernelArg> for TransformKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Wht => TransformKind::Wht,
            KernelArg::Dct => TransformKind::Dct,
            KernelArg::Dht => TransformKind::Dht,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "heavy-tailed-spikes")]
    pub kind: SynthKindArg,
    #[arg(long, default_value_t = 256)]
    pub d_out: usize,
    #[arg(long, default_value_t = 256)]
    pub d_in: usize,
    /// Activation columns.
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub spike_fraction: f64,
    #[arg(long, default_value_t = 8.0)]
    pub spike_scale: f64,
    #[arg(long, default_value_t = 0.10)]
    pub spike_channel_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives weights.sadp, activations.sadp and synth.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct QuantArgs {
    #[arg(long, default_value_t = 4)]
    pub bits: u8,
    #[arg(long, default_value_t = 64)]
    pub group_size: usize,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// SADP or CSV weight matrix.
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Quantized layer (SADQ).
    #[arg(long)]
    pub out: PathBuf,
    /// Quantization error matrix W − W_Q.
    #[arg(long)]
    pub error_out: PathBuf,
    /// Dequantized weights W_Q.
    #[arg(long)]
    pub dequant_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Activation batches, each d_in × samples.
    #[arg(long, required = true, num_args = 1..)]
    pub activations: Vec<PathBuf>,
    /// R in SADP format; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BudgetArgs {
    /// Total number of adapter coefficients.
    #[arg(long, conflicts_with = "rank_equivalent")]
    pub p: Option<usize>,
    /// Budget of a rank-r adapter, (d_in + d_out)·r. Defaults to r = 64.
    #[arg(long)]
    pub rank_equivalent: Option<usize>,
}

impl BudgetArgs {
    pub fn resolve(&self, d_out: usize, d_in: usize) -> usize {
        match (self.p, self.rank_equivalent) {
            (Some(p), _) => p,
            (None, r) => qwha_core::init::rank_equivalent_budget(d_out, d_in, r.unwrap_or(64)),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AdapterArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, value_enum, default_value = "adaalloc")]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "wht")]
    pub kernel: KernelArg,
    /// Transform both sides (DCT/DHT comparison adapters).
    #[arg(long)]
    pub two_sided: bool,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 2)]
    pub min_per_channel: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep dense-solution values instead of refitting them.
    #[arg(long)]
    pub no_refine: bool,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Quantization error ΔW_Q.
    #[arg(long, conflicts_with = "weights", required_unless_present = "weights")]
    pub error: Option<PathBuf>,
    /// Full-precision weights, quantized with --bits/--group-size first.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Calibration factor written by `calibrate`.
    #[arg(long)]
    pub calib: PathBuf,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-channel JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub error: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long, default_value = "layer")]
    pub label: String,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub error: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "adaalloc,random,magnitude,ssh")]
    pub strategies: Vec<StrategyArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "wht,dct,dht")]
    pub kernels: Vec<KernelArg>,
    /// Use the single-transform form for DCT and DHT as well.
    #[arg(long)]
    pub single_sided: bool,
    /// Add the calibrated truncated-SVD low-rank row at this rank.
    #[arg(long)]
    pub svd_rank: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "layer")]
    pub label: String,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub activations: Vec<PathBuf>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    /// Receives every intermediate artifact and the report.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,256,1024,4096")]
    pub sizes: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "wht")]
    pub kernels: Vec<KernelArg>,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    /// Timing CSV; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meshmoe::dynamic::DispatchMode;
use meshmoe::Strategy;

#[derive(Debug, Parser)]
#[command(
    name = "meshmoe",
    version,
    about = "MoE expert placement and mesh network simulation"
)]
pub struct Cli {
    /// Root seed; every component derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for relative output paths.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic routing trace.
    GenTrace(GenTraceArgs),
    /// Fit γ against simulated random placements.
    Calibrate(CalibrateArgs),
    /// Build a placement and node mapping.
    Plan(PlanArgs),
    /// Evaluate a placement and export a link heatmap.
    Simulate(SimulateArgs),
    /// Replay a trace with and without dynamic pre-broadcast.
    DynamicSim(DynamicArgs),
    /// Evaluate several strategies against tensor parallelism.
    Compare(CompareArgs),
    /// Turn earlier run outputs into CSV tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArg {
    /// Preset name (mixtral, deepseek, qwen) or a JSON model file.
    #[arg(long)]
    pub model: String,
}

#[derive(Debug, Clone, Args)]
pub struct MeshArgs {
    /// Mesh shape as ROWSxCOLS.
    #[arg(long, default_value = "4x4")]
    pub mesh: String,
    /// Hardware profile, e.g. 5TF:50GBps or 5TF:50GBps:10ns.
    #[arg(long, default_value = "5TF:50GBps")]
    pub hw: String,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Override the model's layer count.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 4)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.0)]
    pub skew: f64,
    #[arg(long, default_value_t = 0.0)]
    pub affinity: f64,
    #[arg(long, default_value_t = 0.0)]
    pub locality: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drift: f64,
    #[arg(short, long, default_value = "trace.jsonl")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long, default_value_t = meshmoe::pipeline::DEFAULT_CALIBRATION_SAMPLES)]
    pub samples: usize,
    /// Report path; the sample table is written next to it as CSV.
    #[arg(short, long, default_value = "calibration.json")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Tp,
    Ep,
    HybridCb,
    Node,
    NodeLink,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Tp => Strategy::Tp,
            StrategyArg::Ep => Strategy::Ep,
            StrategyArg::HybridCb => Strategy::HybridCb,
            StrategyArg::Node => Strategy::NodeBalance,
            StrategyArg::NodeLink => Strategy::NodeLinkBalance,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GammaArgs {
    /// `auto` to calibrate against the simulator, or a positive number.
    #[arg(long, default_value = "auto")]
    pub gamma: String,
    /// Random placements used by `--gamma auto`.
    #[arg(long, default_value_t = meshmoe::pipeline::DEFAULT_CALIBRATION_SAMPLES)]
    pub calibration_samples: usize,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub gamma: GammaArgs,
    /// Region count for hybrid-cb.
    #[arg(long)]
    pub regions: Option<usize>,
    /// Simulator evaluations for the node-link mapping search.
    #[arg(long, default_value_t = meshmoe::pipeline::DEFAULT_MAPPING_BUDGET)]
    pub mapping_budget: usize,
    #[arg(short, long, default_value = "placement.json")]
    pub output: PathBuf,
    #[arg(long, default_value = "mapping.json")]
    pub mapping_output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long)]
    pub placement: PathBuf,
    /// Logical-to-physical mapping (identity when absent).
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[command(flatten)]
    pub gamma: GammaArgs,
    /// Layer whose traffic is drawn in the heatmap.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Iteration whose traffic is drawn in the heatmap.
    #[arg(long, default_value_t = 0)]
    pub iteration: usize,
    #[arg(long, default_value_t = meshmoe::netsim::DEFAULT_CHUNK_BYTES)]
    pub chunk_bytes: u64,
    /// Report path; the heatmap is written next to it as CSV.
    #[arg(short, long, default_value = "simulation.json")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DispatchArg {
    LeastLoaded,
    CommFree,
}

impl From<DispatchArg> for DispatchMode {
    fn from(d: DispatchArg) -> Self {
        match d {
            DispatchArg::LeastLoaded => DispatchMode::LeastLoaded,
            DispatchArg::CommFree => DispatchMode::CommFree,
        }
    }
}

#[derive(Debug, Args)]
pub struct DynamicArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long)]
    pub placement: PathBuf,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Expert-prediction accuracy in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    pub accuracy: f64,
    #[arg(long, value_enum, default_value = "on")]
    pub enable_dynamic: Switch,
    /// Cap on pre-broadcasts per layer.
    #[arg(long)]
    pub max_broadcasts: Option<usize>,
    #[arg(long, value_enum, default_value = "least-loaded")]
    pub dispatch: DispatchArg,
    #[command(flatten)]
    pub gamma: GammaArgs,
    /// Also replay both dispatches through the network simulator.
    #[arg(long)]
    pub simulate_traffic: bool,
    /// Report path; latency pairs are written next to it as CSV.
    #[arg(short, long, default_value = "dynamic.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value = "4x4")]
    pub mesh: String,
    /// Hardware profiles; one comparison per profile.
    #[arg(long, num_args = 1.., default_value = "5TF:50GBps")]
    pub hw: Vec<String>,
    #[arg(long, value_enum, value_delimiter = ',', num_args = 1.., required = true)]
    pub strategies: Vec<StrategyArg>,
    #[command(flatten)]
    pub gamma: GammaArgs,
    /// Report path; the TBT and decomposed tables are written next to it.
    #[arg(short, long, default_value = "compare.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON outputs of calibrate, simulate, dynamic-sim or compare.
    pub inputs: Vec<PathBuf>,
}

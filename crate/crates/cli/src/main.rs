//! `skipforge`: train the desk model, generate, invert, edit, transfer style,
//! sweep injection settings, serve the HTTP API and export figures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "skipforge", version, about = "Skip-connection feature injection on a desk-scale diffusion model")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the U-Net and metrics classifier on the synthetic dataset.
    Train(TrainArgs),
    /// Sample one image.
    Generate(GenerateArgs),
    /// DDIM-invert an image to its starting noise.
    Invert(InvertArgs),
    /// Record a source run and inject its skip features into a target run.
    Edit(EditArgs),
    /// Edit with the style-transfer defaults (gamma 0.65, period-15 alternation).
    Style(EditArgs),
    /// Run a grid of injection settings and write results.csv.
    Sweep(SweepArgs),
    /// Inject each tap group in turn and write a labelled montage.
    GroupSweep(GroupSweepArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
    /// Write montage figures.
    ExportFigures(ExportArgs),
}

#[derive(Args, Clone)]
struct CheckpointArg {
    #[arg(long, env = "SKIPFORGE_CHECKPOINT", default_value = "fixtures/desk.ckpt")]
    checkpoint: PathBuf,
}

#[derive(Args, Clone)]
struct OutArg {
    /// Output directory; created if missing.
    #[arg(long, env = "SKIPFORGE_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 7.5)]
    cfg: f32,
    #[arg(long, default_value_t = 0.0)]
    eta: f32,
}

/// Plan flags. Anything left out keeps the mode's default plan.
#[derive(Args, Clone, Default)]
struct PlanArgs {
    /// Comma-separated taps, e.g. 4,5 or h.
    #[arg(long)]
    taps: Option<String>,
    /// Injection window T_END,T_START (inclusive diffusion times).
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Keep every K-th channel original.
    #[arg(long, conflicts_with = "ratio")]
    altern: Option<u32>,
    /// Keep this fraction of channels original.
    #[arg(long)]
    ratio: Option<f32>,
    #[arg(long, value_enum)]
    noise_source: Option<NoiseSourceArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseSourceArg {
    SharedRandom,
    InvertedA,
    InvertedB,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the checkpoint.
    #[arg(long, default_value = "fixtures/desk.ckpt")]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to <out stem>_train_log.csv.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class id, null, or shape/palette/background such as circle/red/solid-blue.
    #[arg(long)]
    cond: String,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    cond: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Clone)]
struct EditArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Replay a request.json written by an earlier run; other run flags are ignored.
    #[arg(long)]
    from_request: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source condition (the class of --image for real-image edits).
    #[arg(long, required_unless_present = "from_request")]
    cond_a: Option<String>,
    /// Target condition (the style class for `style`).
    #[arg(long, alias = "style-cond", required_unless_present = "from_request")]
    cond_b: Option<String>,
    /// Edit this PNG instead of a generated source.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0")]
    cond_a: String,
    #[arg(long, default_value = "16")]
    cond_b: String,
    /// Grid as JSON; without it and without axis flags, the 72-point ablation grid runs.
    #[arg(long, conflicts_with_all = ["sweep_taps", "sweep_windows", "sweep_gammas", "sweep_masks", "sweep_sources"])]
    grid: Option<PathBuf>,
    /// Tap sets separated by ';', e.g. "4;4,5".
    #[arg(long)]
    sweep_taps: Option<String>,
    /// Windows separated by ';', e.g. "0,1000;400,900".
    #[arg(long)]
    sweep_windows: Option<String>,
    /// Gammas separated by ',' or ';'.
    #[arg(long)]
    sweep_gammas: Option<String>,
    /// Masks separated by ';', e.g. "full;period:10".
    #[arg(long)]
    sweep_masks: Option<String>,
    /// Noise sources separated by ';'.
    #[arg(long)]
    sweep_sources: Option<String>,
    #[arg(long, env = "SKIPFORGE_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct GroupSweepArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cond_a: String,
    #[arg(long)]
    cond_b: String,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ServeArgs {
    /// TOML config file; SKIPFORGE_* variables and the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    store_root: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureKind {
    /// Source, baseline and one panel per tap group.
    GroupSweep,
    /// Source, baseline and edited.
    Edit,
    /// The edit at gamma 0, 0.25, 0.5, 0.75 and 1.
    Gamma,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_enum)]
    kind: FigureKind,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0")]
    cond_a: String,
    #[arg(long, default_value = "16")]
    cond_b: String,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    out: OutArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `blockpix`: key generation, block-pixel encryption, reconstruction
//! attacks, security metrics, dataset building, ViT training and the
//! three-panel demo.
//!
//! Exit codes: 0 on success, 1 when any file (or the run) fails, 2 on
//! invalid arguments.

mod commands;
mod config;
mod demo;

use std::path::PathBuf;
use std::process::ExitCode;

use blockpix::imagecore::GridSpec;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] blockpix::Error),
    #[error("{failed} of {total} inputs failed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(blockpix::Error::InvalidArgument(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "blockpix",
    version,
    about = "Keyed block-pixel image encryption toolkit"
)]
struct Cli {
    /// Flat key=value file; keys are long flag names. Flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a 32-byte master key (hex) and print its key_id
    Keygen(KeygenArgs),
    /// Encrypt images into <stem>.enc.png + <stem>.enc.json
    Encrypt(EncryptArgs),
    /// Decrypt <stem>.enc.png files into <stem>.dec.png
    Decrypt(DecryptArgs),
    /// Run ciphertext-only reconstruction attacks
    Attack(AttackArgs),
    /// Security metrics for image pairs, or key sensitivity of plaintexts
    Metrics(MetricsArgs),
    /// Build per-client encrypted shards and a server train/val split
    BuildDataset(BuildDatasetArgs),
    /// Train the ViT on a manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest
    Eval(EvalArgs),
    /// Original | Encrypted | Post-Attack triptych with a summary JSON
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
struct KeygenArgs {
    /// Key file path, or a directory to receive <key_id>.key [default: .]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing key file
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Default)]
struct StageFlags {
    /// Disable per-block pixel scrambling
    #[arg(long)]
    no_pixel_scramble: bool,
    /// Disable block-position shuffling
    #[arg(long)]
    no_block_shuffle: bool,
    /// Disable negative-positive inversion
    #[arg(long)]
    no_negpos: bool,
    /// Disable per-pixel channel shuffling
    #[arg(long)]
    no_channel_shuffle: bool,
}

#[derive(Args, Debug)]
struct EncryptArgs {
    /// Master key file
    #[arg(long)]
    key: Option<PathBuf>,
    /// Block grid as ROWSxCOLS [default: 8x8]
    #[arg(long)]
    grid: Option<GridSpec>,
    #[command(flatten)]
    stages: StageFlags,
    /// Center-crop inputs whose size is not divisible by the grid
    #[arg(long)]
    center_crop: bool,
    /// Worker threads [default: available cores]
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory [default: .]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct DecryptArgs {
    #[arg(long)]
    key: Option<PathBuf>,
    /// Decrypt even when the key fingerprint or plaintext digest disagrees
    #[arg(long)]
    force: bool,
    /// Worker threads [default: available cores]
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory [default: .]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// leading-bit, minimum-difference, combined or all [default: all]
    #[arg(long)]
    kind: Option<String>,
    /// Plaintext for scoring the reconstruction (single input only)
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Leading-bit granularity: block or pixel [default: block]
    #[arg(long)]
    mode: Option<blockpix::attacks::LeadingBitMode>,
    /// Worker threads [default: available cores]
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory [default: .]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Treat inputs as plaintexts and measure one-bit key sensitivity under this key
    #[arg(long)]
    sensitivity_key: Option<PathBuf>,
    /// Seed choosing the flipped key bit [default: 0]
    #[arg(long)]
    flip_seed: Option<u64>,
    /// Grid for sensitivity runs [default: 8x8]
    #[arg(long)]
    grid: Option<GridSpec>,
    /// Output directory for metrics.csv [default: .]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image pairs A1 B1 A2 B2 ..., or plaintexts with --sensitivity-key
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildDatasetArgs {
    /// Dataset root receiving clients/ and server/ [default: dataset]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory of class subdirectories; omit to generate synthetic data
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of clients [default: 2]
    #[arg(long)]
    clients: Option<usize>,
    /// Encrypt every client with this key instead of fresh per-client keys
    #[arg(long)]
    key: Option<PathBuf>,
    /// Synthetic images per class [default: 250]
    #[arg(long)]
    per_class: Option<usize>,
    /// Synthetic classes, 2..=4 [default: 2]
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic image side in pixels [default: 16]
    #[arg(long)]
    size: Option<usize>,
    /// Block grid [default: 4x4]
    #[arg(long)]
    grid: Option<GridSpec>,
    #[command(flatten)]
    stages: StageFlags,
    /// Validation fraction [default: 0.2]
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Seed for synthesis and splitting [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: available cores]
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training manifest
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation manifest
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for model.ckpt and reports [default: model]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 4]
    #[arg(long)]
    patch_size: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    num_heads: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    num_layers: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    mlp_dim: Option<usize>,
    /// Add learned positional embeddings
    #[arg(long)]
    pos_embed: bool,
    /// Initialize the classifier head to zero
    #[arg(long)]
    zero_init_head: bool,
    /// Parameter initialization seed [default: 0]
    #[arg(long)]
    model_seed: Option<u64>,
    /// [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// adam or sgd [default: adam]
    #[arg(long)]
    optimizer: Option<String>,
    /// Shuffling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// f64 or f32 [default: f64]
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    model: Option<PathBuf>,
    /// Manifest to evaluate
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for eval.json [default: .]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Input image; omit to use the built-in synthetic sample
    #[arg(long)]
    sample: Option<PathBuf>,
    /// Key file; omit to use a fixed demo key
    #[arg(long)]
    key: Option<PathBuf>,
    /// [default: 8x8]
    #[arg(long)]
    grid: Option<GridSpec>,
    /// Leading-bit granularity [default: block]
    #[arg(long)]
    mode: Option<blockpix::attacks::LeadingBitMode>,
    /// Output directory [default: demo]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut r = config::Resolver::load(cli.config.as_deref())?;
    match cli.command {
        Command::Keygen(a) => commands::keygen(&mut r, a),
        Command::Encrypt(a) => commands::encrypt(&mut r, a),
        Command::Decrypt(a) => commands::decrypt(&mut r, a),
        Command::Attack(a) => commands::attack(&mut r, a),
        Command::Metrics(a) => commands::metrics(&mut r, a),
        Command::BuildDataset(a) => commands::build_dataset(&mut r, a),
        Command::Train(a) => commands::train(&mut r, a),
        Command::Eval(a) => commands::eval(&mut r, a),
        Command::Demo(a) => demo::run(&mut r, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

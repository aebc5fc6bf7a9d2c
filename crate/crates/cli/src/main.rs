use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use depthsr_core::train::TrainConfig;
use depthsr_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "depthsr", version, about = "Self-supervised image-guided depth super-resolution")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// TOML file with training and loss settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides one config key, e.g. `--set loss.sleeve_width=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a dataset directory or manifest.
    Train(commands::TrainArgs),
    /// Zero-shot refinement of one image/depth pair.
    Refine(commands::RefineArgs),
    /// Compare predicted depth against ground truth.
    Eval(commands::EvalArgs),
    /// Write synthetic benchmark cases.
    Synth(commands::SynthArgs),
    /// Convert a depth map to a PLY mesh and a preview image.
    Export(commands::ExportArgs),
    /// Write the Sobel magnitude and binary edge maps of an image.
    Edges(commands::EdgesArgs),
    /// Evaluate the effect of removing one loss term.
    Ablate(commands::AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SceneChoice {
    Ramp,
    Box,
    Curved,
    Suite,
}

mod exit {
    pub const FAILURE: u8 = 1;
    pub const IO: u8 = 3;
    pub const DATA: u8 = 4;
    pub const CONFIG: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const CHECKPOINT: u8 = 7;
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Io { .. } | Error::Image { .. }) => exit::IO,
        Some(Error::Dimension(_) | Error::Contract(_) | Error::Format { .. } | Error::AllInvalid(_) | Error::EmptyMask) => exit::DATA,
        Some(Error::Config(_) | Error::UnknownLoss(_)) => exit::CONFIG,
        Some(Error::Diverged { .. }) => exit::DIVERGED,
        Some(Error::Checkpoint(_)) => exit::CHECKPOINT,
        None => exit::FAILURE,
    }
}

fn resolve_config(opts: &GlobalOpts) -> anyhow::Result<TrainConfig> {
    let base = match &opts.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&opts.overrides)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.global)?;
    info!("effective config (digest {}):\n{}", cfg.digest(), cfg.to_toml());
    match cli.command {
        Command::Train(a) => commands::train(&cfg, a),
        Command::Refine(a) => commands::refine(&cfg, a),
        Command::Eval(a) => commands::eval(a),
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Export(a) => commands::export(a),
        Command::Edges(a) => commands::edges(&cfg, a),
        Command::Ablate(a) => commands::ablate(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    depthsr_core::alloc::retain_freed_memory();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

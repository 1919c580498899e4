//! `stylize`: style transfer, texture synthesis and super-resolution from the
//! command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on bad arguments.

mod commands;
mod run_io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use stylize_core::{PoolMode, Preset, ScaleSchedule};

#[derive(Parser, Debug)]
#[command(
    name = "stylize",
    version,
    about = "Content-aware neural style transfer"
)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transfer the style of one image onto another.
    Transfer(TransferArgs),
    /// Synthesize a texture from a style image alone.
    Texture(TextureArgs),
    /// Coarse-to-fine transfer over a schedule of sizes.
    Superres(SuperresArgs),
    /// Split, merge or synthesize images by parts.
    Parts {
        #[command(subcommand)]
        mode: PartsMode,
    },
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the contents of a weight container.
    Inspect(InspectArgs),
    /// Write a seeded random-weight container for testing.
    Fixture(FixtureArgs),
}

/// Where the run configuration comes from, plus flag overrides. Flags win
/// over the config, which wins over the preset.
#[derive(Args, Debug, Clone)]
struct RunConfig {
    /// One of the presets I to VIII.
    #[arg(long, value_parser = parse_preset, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Full transfer configuration as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight container (VGWT).
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_parser = parse_pooling)]
    pooling: Option<PoolMode>,
    /// Record per-iteration wall time in the trace.
    #[arg(long)]
    timings: bool,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").args(["preset", "config"]).required(true)))]
struct TransferArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Resize both inputs to this long edge first.
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Args, Debug)]
struct TextureArgs {
    #[arg(long)]
    style: PathBuf,
    /// Long edge of the output; defaults to the style's. Initialization is
    /// always random. Without --preset or --config, preset II is used.
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").args(["preset", "config"]).required(true)))]
struct SuperresArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Strictly increasing long-edge sizes, e.g. 64,128,256.
    #[arg(long, value_parser = parse_schedule)]
    schedule: ScaleSchedule,
    /// Final image; stage_k.png files are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Subcommand, Debug)]
enum PartsMode {
    /// Crop every part of the content (and style) image.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: Option<PathBuf>,
        /// Receives <name>.content.png and <name>.style.png.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Feather part images back onto a base image.
    Merge {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding <name>.<suffix> for every part.
        #[arg(long)]
        parts_dir: PathBuf,
        #[arg(long, default_value = "png")]
        suffix: String,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize every part and merge the results onto the content.
    Run(PartsRunArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").args(["preset", "config"]).required(true)))]
struct PartsRunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write each synthesized part as <name>.png here.
    #[arg(long)]
    parts_dir: Option<PathBuf>,
    /// Parts synthesized concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the random weights and probe points.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference half step used by every check.
    #[arg(long)]
    perturb: Option<f64>,
    /// Pixels probed in the network checks.
    #[arg(long, default_value_t = 30)]
    pixels: usize,
    /// Check these weights instead of random ones.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: stylize_core::Error| e.to_string())
}

fn parse_pooling(s: &str) -> Result<PoolMode, String> {
    s.parse().map_err(|e: stylize_core::Error| e.to_string())
}

fn parse_schedule(s: &str) -> Result<ScaleSchedule, String> {
    let scales = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| format!("`{v}` is not a size"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ScaleSchedule::new(scales).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let progress = !cli.quiet;
    let result = match cli.command {
        Command::Transfer(a) => commands::transfer(a, progress),
        Command::Texture(a) => commands::texture(a, progress),
        Command::Superres(a) => commands::superres(a, progress),
        Command::Parts { mode } => commands::parts(mode, progress),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Fixture(a) => commands::fixture(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

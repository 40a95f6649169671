use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spgcc::cli::{self, parse_flag, PipelineConfig, Summary, SynthSpec};
use spgcc::Result;

/// Unsupervised clustering of hyperspectral images.
///
/// Any configuration key can be overridden after the subcommand with
/// `--key=value`, e.g. `--train.lr=1e-4` or `--num_superpixels=128`.
#[derive(Parser, Debug)]
#[command(name = "spgcc", version)]
struct Cli {
    /// TOML configuration file; the built-in desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Configuration overrides as --key=value.
    #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a blocky synthetic scene and its ground truth.
    Synth {
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        bands: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Pre-train the pixel VAE.
    Pretrain(Overrides),
    /// Split the image into superpixels.
    Segment(Overrides),
    /// Export pixel features with the pre-trained VAE.
    Features(Overrides),
    /// Train the graph network and cluster the superpixels.
    Cluster(Overrides),
    /// Score the cluster map against the ground truth.
    Evaluate(Overrides),
    /// Render a label raster as a color PPM image.
    RenderMap {
        /// Label raster; defaults to the cluster labels.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Palette size; defaults to the configured cluster count.
        #[arg(long)]
        classes: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run segment, pretrain, features, cluster, evaluate and render-map.
    RunAll(Overrides),
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::Synth { .. } => &[],
            Command::Pretrain(o)
            | Command::Segment(o)
            | Command::Features(o)
            | Command::Cluster(o)
            | Command::Evaluate(o)
            | Command::RunAll(o)
            | Command::RenderMap { overrides: o, .. } => &o.overrides,
        }
    }
}

fn run(args: Cli) -> Result<Summary> {
    let mut overrides = args
        .command
        .overrides()
        .iter()
        .map(|f| parse_flag(f))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &args.output_dir {
        overrides.push(("output_dir".into(), format!("{:?}", dir.display().to_string())));
    }
    let config = PipelineConfig::resolve(args.config.as_deref(), &overrides)?;
    match args.command {
        Command::Synth {
            height,
            width,
            bands,
            classes,
            noise,
        } => {
            let spec = SynthSpec {
                height,
                width,
                bands,
                classes,
                noise,
                seed: config.seed,
            };
            cli::cmd_synth(&config, &spec)
        }
        Command::Pretrain(_) => cli::cmd_pretrain(&config),
        Command::Segment(_) => cli::cmd_segment(&config),
        Command::Features(_) => cli::cmd_features(&config),
        Command::Cluster(_) => cli::cmd_cluster(&config),
        Command::Evaluate(_) => cli::cmd_evaluate(&config),
        Command::RenderMap {
            labels, classes, out, ..
        } => cli::cmd_render_map(&config, labels.as_deref(), classes, out.as_deref()),
        Command::RunAll(_) => cli::cmd_run_all(&config, |s| println!("{s}")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code().clamp(1, 255) as u8)
        }
    }
}

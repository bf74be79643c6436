use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use moesumm_cli::{commands, GenerateOptions, Mode};
use moesumm_core::run_config::RunConfig;

/// Train, fine-tune, decode and evaluate main/deputy MoE summarizers.
#[derive(Parser)]
#[command(name = "moesumm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON); defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Mixed training of every weight on all configured datasets.
    Train(Common),
    /// Fine-tune selectors and deputies only, everything else frozen.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarize a JSONL file of {"source", "dataset"?} lines.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
        #[arg(long)]
        beam: Option<usize>,
        /// Dataset id for lines without one.
        #[arg(long, default_value_t = 0)]
        dataset: usize,
    },
    /// ROUGE, utilization, length and margin analytics on held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Write the configured corpora and vocabulary as files.
    Synth(Common),
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::profile("desk")?,
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, out))
}

fn with_beam(mut cfg: RunConfig, beam: Option<usize>) -> Result<RunConfig> {
    if let Some(b) = beam {
        anyhow::ensure!(b >= 1, "--beam must be at least 1");
        cfg.beam_size = b;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = resolve(&common)?;
            let o = commands::train(&cfg, &out)?;
            info!("final loss {:.5}", o.report.final_loss().unwrap_or(f64::NAN));
            println!("{}", o.checkpoint.display());
        }
        Command::Finetune { common, checkpoint } => {
            let (cfg, out) = resolve(&common)?;
            let o = commands::finetune(&checkpoint, &cfg, &out)?;
            println!("{}", o.checkpoint.display());
        }
        Command::Generate {
            common,
            checkpoint,
            input,
            mode,
            beam,
            dataset,
        } => {
            let (cfg, out) = resolve(&common)?;
            let cfg = with_beam(cfg, beam)?;
            let output = out.join("generated.jsonl");
            let opts = GenerateOptions {
                mode,
                beam: cfg.beam_size,
                length_alpha: cfg.length_alpha,
                dataset_id: dataset,
            };
            let n = commands::generate(&checkpoint, &input, &output, &opts)?;
            info!("{n} summaries written");
            println!("{}", output.display());
        }
        Command::Eval { common, checkpoint, beam } => {
            let (cfg, out) = resolve(&common)?;
            let cfg = with_beam(cfg, beam)?;
            commands::eval(&checkpoint, &cfg, &out)?;
            println!("{}", Path::new(&out).join("metrics.json").display());
        }
        Command::Synth(common) => {
            let (cfg, out) = resolve(&common)?;
            for p in commands::synth(&cfg, &out).context("writing corpora")? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOESUMM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

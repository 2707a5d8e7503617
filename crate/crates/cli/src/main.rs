//! `p3d`: data generation, training, finetuning, rollout, sampling and
//! gradient audits driven by JSON configs.

mod commands;
mod config;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use config::{load, resolve_path};

#[derive(Parser)]
#[command(name = "p3d", version, about = "Surrogate models for 3-D PDE fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate PDE families and write datasets
    Gen(Args),
    /// Train a model from scratch or resume a run
    Train(Args),
    /// Train a context model on top of a pretrained backbone
    Finetune(Args),
    /// Autoregressive rollout against stored trajectories
    Rollout(Args),
    /// Draw next-state samples from a flow-matching model
    Sample(Args),
    /// Check every parameter gradient against finite differences
    Gradcheck(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON run configuration
    config: PathBuf,
    /// Overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (falls back to P3D_THREADS)
    #[arg(long)]
    threads: Option<usize>,
}

impl Args {
    fn out(&self, from_config: &Option<PathBuf>) -> Result<PathBuf> {
        match (&self.out, from_config) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(p)) => Ok(resolve_path(&self.config, p)),
            (None, None) => Err(anyhow!("no output directory: pass --out or set \"out\" in the config")),
        }
    }

    fn path(&self, p: &Path) -> PathBuf {
        resolve_path(&self.config, p)
    }
}

fn threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("P3D_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .with_context(|| format!("P3D_THREADS={v:?} is not a count"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => {
            threads(a.threads)?;
            let mut cfg: config::GenConfig = load(&a.config)?;
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            commands::gen::run(&cfg, &a.out(&cfg.out)?)
        }
        Command::Train(a) | Command::Finetune(a) => {
            threads(a.threads)?;
            let mut cfg: config::TrainConfig = load(&a.config)?;
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            cfg.data = a.path(&cfg.data);
            cfg.resume = cfg.resume.as_deref().map(|p| a.path(p));
            cfg.pretrained = cfg.pretrained.as_deref().map(|p| a.path(p));
            cfg.cache_dir = cfg.cache_dir.as_deref().map(|p| a.path(p));
            let finetune = matches!(cli.command, Command::Finetune(_));
            commands::train::run(&cfg, &a.out(&cfg.out)?, finetune)
        }
        Command::Rollout(a) => {
            threads(a.threads)?;
            let mut cfg: config::RolloutConfig = load(&a.config)?;
            cfg.checkpoint = a.path(&cfg.checkpoint);
            cfg.data = a.path(&cfg.data);
            commands::eval::rollout(&cfg, &a.out(&cfg.out)?)
        }
        Command::Sample(a) => {
            threads(a.threads)?;
            let mut cfg: config::SampleConfig = load(&a.config)?;
            cfg.checkpoint = a.path(&cfg.checkpoint);
            cfg.data = a.path(&cfg.data);
            let seed = a.seed.unwrap_or(cfg.seed);
            commands::eval::sample(&cfg, seed, &a.out(&cfg.out)?)
        }
        Command::Gradcheck(a) => {
            threads(a.threads)?;
            let mut cfg: config::GradcheckConfig = load(&a.config)?;
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            commands::gradcheck::run(&cfg, &a.out(&cfg.out)?)
        }
    }
}

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use p3d_core::training::Trainer;

use super::{conditioned, create_dir, datasets, pair_dataset};
use crate::config::TrainConfig;

pub fn run(cfg: &TrainConfig, out: &Path, finetune: bool) -> Result<()> {
    if finetune && (cfg.pretrained.is_none() && cfg.resume.is_none()) {
        bail!("finetuning needs a pretrained checkpoint");
    }
    if finetune && !cfg.setup.mode.uses_context() {
        bail!("finetuning trains a context model; choose a context mode");
    }
    if !finetune && cfg.pretrained.is_some() {
        bail!("pretrained weights are loaded by the finetune command");
    }
    let model = cfg.model.resolve()?;
    let mut trainer = match &cfg.resume {
        Some(dir) => {
            let t = Trainer::resume(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            if t.model.cfg != model
                || t.setup != cfg.setup
                || t.context.as_ref().map(|c| &c.cfg) != cfg.context.as_ref()
            {
                bail!(
                    "checkpoint {} was written with a different model or setup",
                    dir.display()
                );
            }
            t
        }
        None => {
            let mut t = Trainer::init(&model, cfg.context.as_ref(), cfg.setup.clone(), cfg.seed)?;
            if let Some(dir) = &cfg.pretrained {
                t.load_weights(dir, &["context."])
                    .with_context(|| format!("loading weights from {}", dir.display()))?;
            }
            t
        }
    };
    trainer.cache_dir = cfg.cache_dir.clone();
    trainer.dump_dir = Some(out.join("nonfinite"));

    let sets = datasets(&cfg.data)?;
    let data = pair_dataset(&sets, conditioned(&trainer))?;
    if data.is_empty() {
        bail!("no training pairs under {}", cfg.data.display());
    }
    if trainer.step > cfg.steps {
        bail!(
            "checkpoint is at step {}, past the requested {}",
            trainer.step,
            cfg.steps
        );
    }

    create_dir(out)?;
    let log_path = out.join("loss.csv");
    let fresh = !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "step,loss,lr,grad_norm")?;
    }
    let todo = cfg.steps - trainer.step;
    let stats = trainer.run(&data, todo, &mut log, Some(out), cfg.checkpoint_every)?;
    log.flush()?;
    if let Some(s) = stats.last() {
        println!("step {}: loss {:.6e}", s.step, s.loss);
    }
    println!("checkpoint written to {}", out.join("last").display());
    Ok(())
}

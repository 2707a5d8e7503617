use std::path::Path;

use anyhow::{Context, Result};
use p3d_core::datagen::{simulate, write_dataset, PdeSpec, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::create_dir;
use crate::config::GenConfig;

/// Seed of run `r` of a family, independent of which other families are listed.
fn run_seed(seed: u64, family: usize, run: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((family as u64) << 32 | run as u64)
}

pub fn run(cfg: &GenConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    for &family in &cfg.families {
        for r in 0..cfg.runs {
            let seed = run_seed(cfg.seed, family.index(), r);
            let spec = match cfg.params.get(&family.name()) {
                Some(p) => PdeSpec::new(family, p.clone())?,
                None => PdeSpec::sample(family, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x7061_7261_6d73)),
            };
            let mut sim = SimConfig::for_family(family, cfg.resolution, cfg.snapshots, seed);
            sim.order = cfg.order;
            sim.dtype = cfg.dtype;
            let ds = simulate(&spec, &sim).with_context(|| format!("simulating {family} run {r}"))?;
            let dir = out.join(format!("{}-{r:03}", family.name()));
            write_dataset(&ds, &dir)?;
            println!(
                "{}: {} snapshots, params {:?}",
                dir.display(),
                ds.states.len(),
                spec.params
            );
        }
    }
    Ok(())
}

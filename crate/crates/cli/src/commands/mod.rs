pub mod eval;
pub mod gen;
pub mod gradcheck;
pub mod train;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use p3d_core::datagen::{read_collection, Dataset};
use p3d_core::numerics::{ParamStore, Tensor};
use p3d_core::training::{pad_channels, PairDataset, Trainer, Trajectory};

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn datasets(dir: &Path) -> Result<Vec<(String, Dataset)>> {
    let sets = read_collection(dir).with_context(|| format!("reading datasets under {}", dir.display()))?;
    let names = if dir.join(p3d_core::datagen::MANIFEST).exists() {
        vec![dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())]
    } else {
        let mut subdirs: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(p3d_core::datagen::MANIFEST).exists())
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        subdirs.sort();
        subdirs
    };
    Ok(names.into_iter().zip(sets).collect())
}

/// Training pairs from every dataset, channels zero-padded to the largest count.
pub fn pair_dataset(sets: &[(String, Dataset)], with_cond: bool) -> Result<PairDataset<f32>> {
    let channels = sets
        .iter()
        .map(|(_, d)| d.manifest.channel_names.len())
        .max()
        .unwrap_or(1);
    let trajectories = sets
        .iter()
        .map(|(_, d)| {
            let tr = d.trajectory(with_cond);
            Ok(Trajectory {
                states: tr
                    .states
                    .iter()
                    .map(|s| pad_channels(s, channels))
                    .collect::<p3d_core::Result<_>>()?,
                cond: tr.cond,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairDataset::new(trajectories)?)
}

/// Whether a model expects physical parameters or family labels.
pub fn conditioned(t: &Trainer) -> bool {
    t.model.cfg.num_params > 0 || t.model.cfg.num_labels > 0
}

pub fn weights(t: &Trainer, ema: bool) -> &ParamStore<f32> {
    if ema {
        &t.ema.shadow
    } else {
        &t.store
    }
}

pub fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    t.cast()
}

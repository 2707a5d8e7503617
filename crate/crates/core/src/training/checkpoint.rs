//! Checkpoint directories: `manifest.json` plus one blob per named parameter
//! under `params/`, and optionally `ema/` and `optimizer/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::setup::TrainSetup;
use crate::backbone::ModelConfig;
use crate::context::{ContextConfig, RegionLayout};
use crate::error::{Error, Result};
use crate::numerics::{blob, ParamId, ParamStore, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    #[serde(default)]
    pub context: Option<ContextConfig>,
    #[serde(default)]
    pub layout: Option<RegionLayout>,
    #[serde(default)]
    pub setup: Option<TrainSetup>,
    pub step: usize,
    pub seed: u64,
    /// Position of the training random stream, as a decimal string.
    #[serde(default)]
    pub rng_word_pos: Option<String>,
    pub params: Vec<String>,
    #[serde(default)]
    pub ema: bool,
    /// Per-parameter optimizer update counts when optimizer state is stored.
    #[serde(default)]
    pub optimizer_counts: Option<Vec<u64>>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

fn blob_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.blob"))
}

/// Writes one blob per parameter into `dir`: its value plus, for each
/// `(tag, tensors)` in `extra`, the parameter's entry of `tensors`.
pub fn write_tensors<T: Scalar>(dir: &Path, store: &ParamStore<T>, extra: &[(&str, &[Tensor<T>])]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for id in store.ids() {
        let mut records = vec![("value", store.get(id))];
        for (tag, ts) in extra {
            records.push((tag, &ts[id.0]));
        }
        blob::write_file(&blob_path(dir, store.name(id)), &records)?;
    }
    Ok(())
}

/// Reads every parameter of `store` from `dir`. Parameters whose name starts
/// with one of `optional` may be absent and then keep their current value.
/// Returns the extra records of each parameter that was read.
pub fn read_tensors<T: Scalar>(
    dir: &Path,
    store: &mut ParamStore<T>,
    optional: &[&str],
) -> Result<Vec<Option<Vec<(String, Tensor<T>)>>>> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut extras = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.name(id).to_string();
        let path = blob_path(dir, &name);
        if !path.exists() && optional.iter().any(|p| name.starts_with(p)) {
            extras.push(None);
            continue;
        }
        let mut records = blob::read_file::<T>(&path)?;
        let pos = records
            .iter()
            .position(|(n, _)| n == "value")
            .ok_or_else(|| Error::Corrupt {
                path: path.clone(),
                reason: "no value record".into(),
            })?;
        let (_, value) = records.remove(pos);
        if value.shape() != store.get(id).shape() {
            return Err(Error::Corrupt {
                path,
                reason: format!("shape {:?}, model expects {:?}", value.shape(), store.get(id).shape()),
            });
        }
        *store.get_mut(id) = value;
        extras.push(Some(records));
    }
    Ok(extras)
}

/// Content hash of a subset of parameters and a config, used to key caches.
pub fn params_hash<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId], salt: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    for &id in ids {
        h.update(store.name(id).as_bytes());
        let t = store.get(id);
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        h.update(&bytes);
    }
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

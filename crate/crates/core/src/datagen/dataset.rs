//! Running a simulation and the on-disk dataset layout: `manifest.json` plus
//! one blob per stored snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::etdrk::{EtdOrder, EtdStepper, SpecState};
use super::family::{Family, PdeSpec};
use super::init::{init_gs_blobs, Initializer};
use super::spectral::Grid;
use crate::backbone::Conditioning;
use crate::error::{Error, Result};
use crate::numerics::{blob, DType, Tensor};
use crate::training::Trajectory;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub resolution: [usize; 3],
    pub dt_store: f64,
    pub substeps: usize,
    /// Stored steps simulated and discarded before the first snapshot.
    pub warmup: usize,
    pub snapshots: usize,
    pub seed: u64,
    #[serde(default)]
    pub order: EtdOrder,
    #[serde(default = "f32_dtype")]
    pub dtype: DType,
}

fn f32_dtype() -> DType {
    DType::F32
}

impl SimConfig {
    /// The family's usual time stepping on an `n³` grid.
    pub fn for_family(family: Family, n: usize, snapshots: usize, seed: u64) -> Self {
        let s = family.stepping();
        SimConfig {
            resolution: [n; 3],
            dt_store: s.dt_store,
            substeps: s.substeps,
            warmup: s.warmup,
            snapshots,
            seed,
            order: EtdOrder::default(),
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if self.snapshots == 0 {
            return Err(Error::Config("at least one snapshot is needed".into()));
        }
        if !(self.dt_store > 0.0 && self.dt_store.is_finite()) {
            return Err(Error::Config(format!(
                "dt_store must be positive, got {}",
                self.dt_store
            )));
        }
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!("resolution {:?} too small", self.resolution)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub family: Family,
    pub label: usize,
    pub params: BTreeMap<String, f64>,
    pub normalized_params: Vec<f64>,
    pub domain: f64,
    pub channel_names: Vec<String>,
    pub initializer: Option<Initializer>,
    pub sim: SimConfig,
    pub snapshots: usize,
}

/// One simulation: states `[C, X, Y, Z]` at successive stored times.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub states: Vec<Tensor<f64>>,
}

impl Dataset {
    pub fn spec(&self) -> Result<PdeSpec> {
        let m = &self.manifest;
        let params = m
            .family
            .ranges()
            .iter()
            .map(|r| {
                m.params
                    .get(r.name)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("manifest lacks parameter {}", r.name)))
            })
            .collect::<Result<_>>()?;
        PdeSpec::new(m.family, params)
    }

    /// Parameters and family label as model conditioning.
    pub fn conditioning(&self) -> Conditioning {
        Conditioning {
            params: self.manifest.normalized_params.clone(),
            label: Some(self.manifest.label),
            t: None,
        }
    }

    /// The states in single precision, with or without conditioning.
    pub fn trajectory(&self, with_cond: bool) -> Trajectory<f32> {
        Trajectory {
            states: self.states.iter().map(|s| s.cast()).collect(),
            cond: if with_cond {
                self.conditioning()
            } else {
                Conditioning::default()
            },
        }
    }
}

fn round_to(dtype: DType, t: Tensor<f64>) -> Tensor<f64> {
    match dtype {
        DType::F32 => t.cast::<f32>().cast(),
        DType::F64 => t,
    }
}

/// Initial spectral state of a simulation and the initializer used.
fn initial_state(spec: &PdeSpec, grid: &Grid, rng: &mut ChaCha8Rng) -> Result<(SpecState, Option<Initializer>)> {
    let dims = grid.dims;
    let (fields, init) = match spec.family {
        Family::Gs(v) => {
            let (a, b) = init_gs_blobs(rng, dims, v.blob_fraction());
            (vec![a, b], None)
        }
        f => {
            let init = Initializer::sample(rng);
            let mut fields = (0..f.channels())
                .map(|_| init.generate(rng, dims))
                .collect::<Result<Vec<_>>>()?;
            if f == Family::Fisher {
                for u in &mut fields {
                    u.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                }
            }
            (fields, Some(init))
        }
    };
    let mut state = fields.iter().map(|u| grid.forward(u)).collect::<Result<SpecState>>()?;
    if !spec.family.is_linear() {
        for h in &mut state {
            grid.dealias(h);
        }
    }
    Ok((state, init))
}

fn to_tensor(grid: &Grid, state: &SpecState) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(state.len() * grid.physical_len());
    for h in state {
        data.extend(grid.inverse(h)?);
    }
    let d = grid.dims;
    Tensor::new(&[state.len(), d[0], d[1], d[2]], data)
}

/// Simulates from a random initial state drawn from `cfg.seed`.
pub fn simulate(spec: &PdeSpec, cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let grid = Grid::new(cfg.resolution, [spec.domain(); 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (state, init) = initial_state(spec, &grid, &mut rng)?;
    let states = simulate_from(spec, cfg, &grid, state)?;
    let manifest = DatasetManifest {
        family: spec.family,
        label: spec.family.index(),
        params: spec
            .family
            .ranges()
            .iter()
            .zip(&spec.params)
            .map(|(r, &v)| (r.name.to_string(), v))
            .collect(),
        normalized_params: spec.normalized(),
        domain: spec.domain(),
        channel_names: spec.family.channel_names(),
        initializer: init,
        sim: cfg.clone(),
        snapshots: states.len(),
    };
    Ok(Dataset { manifest, states })
}

/// Integrates a given spectral start state and returns the stored snapshots.
pub fn simulate_from(spec: &PdeSpec, cfg: &SimConfig, grid: &Grid, mut state: SpecState) -> Result<Vec<Tensor<f64>>> {
    cfg.validate()?;
    let dt = cfg.dt_store / cfg.substeps as f64;
    let stepper = EtdStepper::new(&spec.linear(grid), dt, cfg.order)?;
    let mut n = |u: &SpecState| spec.nonlinear(grid, u);
    let mut out = Vec::with_capacity(cfg.snapshots);
    let total = cfg.warmup + cfg.snapshots;
    for k in 0..total {
        if k > 0 {
            for _ in 0..cfg.substeps {
                stepper.step(&mut state, &mut n)?;
            }
        }
        if state.iter().flatten().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite(format!("{} state at stored step {k}", spec.family)));
        }
        if k >= cfg.warmup {
            out.push(round_to(cfg.dtype, to_tensor(grid, &state)?));
        }
    }
    Ok(out)
}

fn snapshot_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("snapshot_{k:05}.blob"))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    if ds.manifest.snapshots != ds.states.len() {
        return Err(Error::Config(format!(
            "manifest lists {} snapshots, dataset holds {}",
            ds.manifest.snapshots,
            ds.states.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, s) in ds.states.iter().enumerate() {
        let path = snapshot_path(dir, k);
        match ds.manifest.sim.dtype {
            DType::F32 => blob::write_file(&path, &[("state", &s.cast::<f32>())])?,
            DType::F64 => blob::write_file(&path, &[("state", s)])?,
        }
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let shape = {
        let r = manifest.sim.resolution;
        [manifest.channel_names.len(), r[0], r[1], r[2]]
    };
    let mut states = Vec::with_capacity(manifest.snapshots);
    for k in 0..manifest.snapshots {
        let path = snapshot_path(dir, k);
        let mut recs = blob::read_file::<f64>(&path)?;
        if recs.len() != 1 || recs[0].0 != "state" || recs[0].1.shape() != shape {
            return Err(Error::Corrupt {
                path,
                reason: format!("expected one state record of shape {shape:?}"),
            });
        }
        states.push(recs.remove(0).1);
    }
    if snapshot_path(dir, manifest.snapshots).exists() {
        return Err(Error::Corrupt {
            path: dir.to_path_buf(),
            reason: format!("more snapshot files than the {} listed", manifest.snapshots),
        });
    }
    Ok(Dataset { manifest, states })
}

/// Every dataset found directly in `dir` or in its immediate subdirectories,
/// in path order.
pub fn read_collection(dir: &Path) -> Result<Vec<Dataset>> {
    if dir.join(MANIFEST).exists() {
        return Ok(vec![read_dataset(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Config(format!("no datasets under {}", dir.display())));
    }
    subdirs.iter().map(|p| read_dataset(p)).collect()
}

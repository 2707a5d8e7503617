//! JSON run configurations, one per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use p3d_core::backbone::ModelConfig;
use p3d_core::context::ContextConfig;
use p3d_core::datagen::{EtdOrder, Family};
use p3d_core::evalharness::{RolloutStrategy, Window};
use p3d_core::numerics::DType;
use p3d_core::training::TrainSetup;
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A preset name (`tiny`, `S`, `B`, `L`) or a full architecture.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Full(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => match ModelConfig::by_name(name) {
                Some(c) => Ok(c),
                None => bail!("unknown model preset {name:?}"),
            },
            ModelSpec::Full(c) => Ok(c.clone()),
        }
    }
}

/// Relative paths in a config are taken relative to the config file.
pub fn resolve_path(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub families: Vec<Family>,
    pub resolution: usize,
    pub snapshots: usize,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fixed parameters per family name; sampled from the family's range otherwise.
    #[serde(default)]
    pub params: std::collections::BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub order: EtdOrder,
    #[serde(default = "f32_dtype")]
    pub dtype: DType,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub context: Option<ContextConfig>,
    pub setup: TrainSetup,
    /// A dataset directory or a directory of datasets.
    pub data: PathBuf,
    pub steps: usize,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Checkpoint to continue from; `steps` counts from the start of the run.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Checkpoint whose weights initialise the model (finetuning).
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "yes")]
    pub ema: bool,
    pub data: PathBuf,
    pub steps: usize,
    /// Whole stored domain as one tile when absent.
    #[serde(default)]
    pub strategy: Option<RolloutStrategy>,
    /// Index of the stored state the rollout starts from.
    #[serde(default)]
    pub start: usize,
    /// Adds the enstrophy-graph error for three-component velocity data.
    #[serde(default)]
    pub enstrophy: Option<Window>,
    #[serde(default)]
    pub save_states: bool,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "yes")]
    pub ema: bool,
    pub data: PathBuf,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default = "hundred")]
    pub euler_steps: usize,
    #[serde(default)]
    pub flow_channel: usize,
    #[serde(default = "one")]
    pub wall_axis: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub model: ModelSpec,
    #[serde(default = "sixteen")]
    pub resolution: usize,
    #[serde(default = "two")]
    pub entries: usize,
    #[serde(default = "step_h")]
    pub h: f64,
    #[serde(default = "tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn sixteen() -> usize {
    16
}
fn hundred() -> usize {
    100
}
fn yes() -> bool {
    true
}
fn step_h() -> f64 {
    1e-6
}
fn tol() -> f64 {
    1e-4
}
fn f32_dtype() -> DType {
    DType::F32
}

//! Training setups: which part of a domain a step sees and which modules
//! receive gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::flow::SIGMA_MIN;
use super::optim::AdamWConfig;
use crate::backbone::DECODER_UNITS;
use crate::context::RegionMask;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// How a step forwards a training domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainMode {
    /// The whole stored domain in one forward.
    FullDomain,
    /// Random crops of `TrainSetup::crop` size.
    Crops,
    /// Per-region encoders and decoders joined by the context model, all trained.
    ContextFull,
    /// Each region's encoder is trained with probability `p_enc`, each decoder
    /// unit of each region with probability `p_dec`.
    ContextPartial { p_enc: f64, p_dec: f64 },
    /// Encoders and the conditioning embedder stay fixed; decoder units are
    /// trained with probability `p_dec`. With `precompute`, encoder outputs are
    /// computed once per training sample and reused.
    ContextFrozenEncoder {
        #[serde(default = "one")]
        p_dec: f64,
        #[serde(default)]
        precompute: bool,
    },
}

fn one() -> f64 {
    1.0
}

impl TrainMode {
    pub fn uses_context(&self) -> bool {
        !matches!(self, TrainMode::FullDomain | TrainMode::Crops)
    }
}

/// Training target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Objective {
    /// Direct next-state regression.
    Mse,
    /// Velocity regression along the noise-to-data path. With `with_input`
    /// the model also sees the previous state as extra channels.
    FlowMatching {
        #[serde(default = "default_sigma_min")]
        sigma_min: f64,
        #[serde(default = "yes")]
        with_input: bool,
    },
}

fn default_sigma_min() -> f64 {
    SIGMA_MIN
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    pub mode: TrainMode,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    /// Crop size for [`TrainMode::Crops`]; for context modes, the domain
    /// cropped out of each stored state (whole state when absent).
    #[serde(default)]
    pub crop: Option<[usize; 3]>,
    /// Region size for context modes.
    #[serde(default)]
    pub region: Option<[usize; 3]>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
}

fn default_objective() -> Objective {
    Objective::Mse
}
fn default_batch() -> usize {
    4
}
fn default_ema() -> f64 {
    0.999
}

impl TrainSetup {
    pub fn new(mode: TrainMode) -> Self {
        TrainSetup {
            mode,
            objective: Objective::Mse,
            crop: None,
            region: None,
            batch: default_batch(),
            optimizer: AdamWConfig::default(),
            ema_decay: default_ema(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} = {p} is not a probability")))
            }
        };
        match self.mode {
            TrainMode::ContextPartial { p_enc, p_dec } => {
                prob(p_enc, "p_enc")?;
                prob(p_dec, "p_dec")?;
            }
            TrainMode::ContextFrozenEncoder { p_dec, precompute } => {
                prob(p_dec, "p_dec")?;
                if precompute && self.objective != Objective::Mse {
                    return Err(Error::Config(
                        "encoder outputs can only be precomputed for the MSE objective".into(),
                    ));
                }
            }
            TrainMode::Crops if self.crop.is_none() => {
                return Err(Error::Config("crop mode needs a crop size".into()));
            }
            _ => {}
        }
        if self.mode.uses_context() && self.region.is_none() {
            return Err(Error::Config("context modes need a region size".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }
}

/// Same random window of `size` voxels from both `[C, X, Y, Z]` states.
/// Offsets are uniform over every valid start, bounds included.
pub fn crop_sample<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    target: &Tensor<T>,
    size: [usize; 3],
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>, [usize; 3])> {
    let (si, st) = (input.shape(), target.shape());
    if si.len() != 4 || st.len() != 4 || si[1..] != st[1..] {
        return Err(shape_err!(
            "crop needs matching [C, X, Y, Z] states, got {:?} and {:?}",
            si,
            st
        ));
    }
    let mut off = [0; 3];
    for a in 0..3 {
        if size[a] == 0 || size[a] > si[1 + a] {
            return Err(shape_err!("crop {:?} does not fit domain {:?}", size, &si[1..]));
        }
        off[a] = rng.random_range(0..=si[1 + a] - size[a]);
    }
    let cut = |t: &Tensor<T>| t.read_block(&[0, off[0], off[1], off[2]], &[t.shape()[0], size[0], size[1], size[2]]);
    Ok((cut(input)?, cut(target)?, off))
}

/// Samples which encoders and decoder units receive gradients in one step.
pub fn grad_scope<R: Rng + ?Sized>(mode: &TrainMode, regions: usize, rng: &mut R) -> RegionMask {
    let mut draw = |p: f64| p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p);
    match *mode {
        TrainMode::ContextPartial { p_enc, p_dec } => {
            let encoders = (0..regions).map(|_| draw(p_enc)).collect();
            let decoders = (0..regions).map(|_| std::array::from_fn(|_| draw(p_dec))).collect();
            RegionMask { encoders, decoders }
        }
        TrainMode::ContextFrozenEncoder { p_dec, .. } => RegionMask {
            encoders: vec![false; regions],
            decoders: (0..regions)
                .map(|_| std::array::from_fn::<bool, DECODER_UNITS, _>(|_| draw(p_dec)))
                .collect(),
        },
        _ => RegionMask::all(regions),
    }
}

//! Convolutional encoder and decoder of the U-shaped backbone.

use rand::Rng;

use super::layers::{modulate, Conv, GroupNorm, Linear};
use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::numerics::{pixel_shuffle_3d, Init, PadMode, ParamId, Scalar, Session, Var};

/// Residual block `x + conv(GELU(mod(GN(conv(GELU(GN(x)))), e)))`, identity at init.
#[derive(Clone, Debug)]
pub struct ResBlock {
    n1: GroupNorm,
    c1: Conv,
    n2: GroupNorm,
    modulation: Linear,
    c2: Conv,
    channels: usize,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: &ModelConfig, c: usize) -> Self {
        let groups = cfg.groups_for(c);
        init.scoped(name, |init| ResBlock {
            n1: GroupNorm::new(init, "norm1", c, groups),
            c1: Conv::new(init, "conv1", c, c, 1, false),
            n2: GroupNorm::new(init, "norm2", c, groups),
            modulation: Linear::zero(init, "mod", cfg.cond_dim, 2 * c, true),
            c2: Conv::new(init, "conv2", c, c, 1, true),
            channels: c,
        })
    }

    pub fn fwd<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        x: Var<'g, T>,
        e: Var<'g, T>,
        pad: PadMode,
    ) -> Result<Var<'g, T>> {
        let h = self.n1.fwd(sess, x)?.gelu();
        let h = self.c1.fwd(sess, h, pad)?;
        let h = self.n2.fwd(sess, h)?;
        let ss = self.modulation.fwd(sess, e)?;
        let c = self.channels;
        let h = modulate(h, ss.narrow(1, 0, c)?, ss.narrow(1, c, c)?)?.gelu();
        let h = self.c2.fwd(sess, h, pad)?;
        x.add(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.n1.params(),
            self.c1.params(),
            self.n2.params(),
            self.modulation.params(),
            self.c2.params(),
        ]
        .concat()
    }
}

#[derive(Clone, Debug)]
struct EncLevel {
    blocks: Vec<ResBlock>,
    down: Conv,
}

/// Stem conv followed by two levels of residual blocks and stride-2 downsampling.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    stem: Conv,
    levels: Vec<EncLevel>,
}

/// Encoder output: bottleneck features and the residuals saved before each
/// downsampling step (finest first).
pub struct EncoderOut<'g, T: Scalar> {
    pub features: Var<'g, T>,
    pub residuals: Vec<Var<'g, T>>,
}

pub const BLOCKS_PER_LEVEL: usize = 2;

impl ConvEncoder {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dims;
        init.scoped("enc", |init| ConvEncoder {
            stem: Conv::new(init, "stem", cfg.in_channels, d[0], 1, false),
            levels: (0..2)
                .map(|l| {
                    init.scoped(&format!("level{l}"), |init| EncLevel {
                        blocks: (0..BLOCKS_PER_LEVEL)
                            .map(|b| ResBlock::new(init, &format!("block{b}"), cfg, d[l]))
                            .collect(),
                        down: Conv::new(init, "down", d[l], d[l + 1], 2, false),
                    })
                })
                .collect(),
        })
    }

    pub fn fwd<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        x: Var<'g, T>,
        e: Var<'g, T>,
        pad: PadMode,
    ) -> Result<EncoderOut<'g, T>> {
        let mut h = self.stem.fwd(sess, x, pad)?;
        let mut residuals = Vec::new();
        for level in &self.levels {
            for blk in &level.blocks {
                h = blk.fwd(sess, h, e, pad)?;
            }
            residuals.push(h);
            h = level.down.fwd(sess, h, pad)?;
        }
        Ok(EncoderOut { features: h, residuals })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.stem.params();
        for l in &self.levels {
            for b in &l.blocks {
                p.extend(b.params());
            }
            p.extend(l.down.params());
        }
        p
    }
}

#[derive(Clone, Debug)]
struct DecLevel {
    up: Conv,
    blocks: Vec<ResBlock>,
}

/// Mirror of [`ConvEncoder`]: channel-expanding conv + 3-D pixel shuffle,
/// residual addition, residual blocks, and an output head.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    levels: Vec<DecLevel>,
    head: Conv,
}

/// Independently maskable units of the decoder conv stage, in execution order:
/// per level the upsampling conv followed by its blocks, then the head.
pub const DECODER_CONV_UNITS: usize = 2 * (1 + BLOCKS_PER_LEVEL) + 1;

impl ConvDecoder {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dims;
        init.scoped("dec", |init| ConvDecoder {
            levels: [1usize, 0]
                .iter()
                .map(|&l| {
                    init.scoped(&format!("level{l}"), |init| DecLevel {
                        up: Conv::new(init, "up", d[l + 1], 8 * d[l], 1, false),
                        blocks: (0..BLOCKS_PER_LEVEL)
                            .map(|b| ResBlock::new(init, &format!("block{b}"), cfg, d[l]))
                            .collect(),
                    })
                })
                .collect(),
            head: Conv::new(init, "head", d[0], cfg.out_channels, 1, false),
        })
    }

    /// `enabled[u]` false runs unit `u` with its parameters held constant.
    pub fn fwd<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        features: Var<'g, T>,
        residuals: &[Var<'g, T>],
        e: Var<'g, T>,
        pad: PadMode,
        enabled: &[bool],
    ) -> Result<Var<'g, T>> {
        if residuals.len() != self.levels.len() || enabled.len() != DECODER_CONV_UNITS {
            return Err(shape_err!(
                "decoder needs {} residuals and {} unit flags, got {} and {}",
                self.levels.len(),
                DECODER_CONV_UNITS,
                residuals.len(),
                enabled.len()
            ));
        }
        let mut h = features;
        let mut unit = 0;
        for (level, res) in self.levels.iter().zip(residuals.iter().rev()) {
            h = sess.with_frozen(!enabled[unit], || level.up.fwd(sess, h, pad))?;
            h = pixel_shuffle_3d(h, 2)?;
            if h.shape() != res.shape() {
                return Err(shape_err!(
                    "residual {:?} does not match upsampled {:?}",
                    res.shape(),
                    h.shape()
                ));
            }
            h = h.add(*res)?;
            unit += 1;
            for blk in &level.blocks {
                h = sess.with_frozen(!enabled[unit], || blk.fwd(sess, h, e, pad))?;
                unit += 1;
            }
        }
        sess.with_frozen(!enabled[unit], || self.head.fwd(sess, h, pad))
    }

    /// Parameters of each maskable unit.
    pub fn unit_params(&self) -> Vec<Vec<ParamId>> {
        let mut out = Vec::new();
        for l in &self.levels {
            out.push(l.up.params());
            for b in &l.blocks {
                out.push(b.params());
            }
        }
        out.push(self.head.params());
        out
    }
}

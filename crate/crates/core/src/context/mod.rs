//! Global context model coordinating independently processed crops.
//!
//! Each crop ("region") is encoded on its own. The bottleneck tokens of all
//! regions, plus one learned token per region, form a single sequence that a
//! stack of global attention blocks processes. The processed latent tokens are
//! added back to each region's decoder input, and each processed region token
//! is mapped to an offset of that region's conditioning embedding.

mod layout;

pub use layout::RegionLayout;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::cond::sinusoid;
use crate::backbone::layers::{modulate, Linear, NORM_EPS};
use crate::backbone::{Conditioning, Encoded, P3d, DECODER_UNITS};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{attention, concat, Init, ParamId, ParamStore, Scalar, Session, Tensor, Var};

/// Sequence mixing kernel used inside the context blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKernel {
    #[default]
    Dense,
}

impl AttentionKernel {
    /// `q, k, v: [B, H, S, Dh]` → `[B, H, S, Dh]`.
    pub fn attend<'g, T: Scalar>(self, q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            AttentionKernel::Dense => attention(q, k, v, None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub latent_dim: usize,
    pub heads: usize,
    #[serde(default)]
    pub kernel: AttentionKernel,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_layers() -> usize {
    6
}
fn default_mlp_ratio() -> usize {
    4
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("context needs at least one layer".into()));
        }
        if self.latent_dim == 0 || self.latent_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} must be a positive multiple of 4",
                self.latent_dim
            )));
        }
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-axis sinusoids of a 3-D coordinate, `3·(dim/4)` features.
pub fn position_features(coord: [usize; 3], dim: usize) -> Vec<f64> {
    coord.iter().flat_map(|&c| sinusoid(c as f64, dim / 4)).collect()
}

#[derive(Clone, Debug)]
struct ContextBlock {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Latent-token embedding, region tokens, global attention stack, and the two
/// zero-initialised outputs (latent skip, region conditioning offset).
#[derive(Clone, Debug)]
pub struct ContextModel {
    pub cfg: ContextConfig,
    latent_in: Linear,
    latent_pos: Linear,
    region_base: ParamId,
    region_pos: Linear,
    blocks: Vec<ContextBlock>,
    latent_out: Linear,
    region_fc1: Linear,
    region_fc2: Linear,
    token_dim: usize,
    cond_dim: usize,
}

/// Context outputs for one domain.
pub struct ContextOut<'g, T: Scalar> {
    /// Per region `[B, tokens_per_region, token_dim]`, added to the decoder input.
    pub latents: Vec<Var<'g, T>>,
    /// Per region `[B, cond_dim]`, added to the decoder conditioning.
    pub offsets: Vec<Var<'g, T>>,
}

impl ContextModel {
    /// Registers parameters under the `context.` prefix.
    pub fn new<T: Scalar, R: Rng>(
        cfg: &ContextConfig,
        backbone: &P3d,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.latent_dim;
        let d = backbone.cfg.transformer_dim;
        let cd = backbone.cfg.cond_dim;
        let pf = 3 * (l / 4);
        let mut init = Init::new(store, rng);
        Ok(init.scoped("context", |init| ContextModel {
            cfg: cfg.clone(),
            latent_in: Linear::new(init, "latent_in", d, l, false),
            latent_pos: Linear::new(init, "latent_pos", pf, l, true),
            region_base: init.normal("region_base", &[l], 0.02),
            region_pos: Linear::new(init, "region_pos", pf, l, true),
            blocks: (0..cfg.layers)
                .map(|i| {
                    init.scoped(&format!("block{i}"), |init| ContextBlock {
                        ada: Linear::zero(init, "ada", cd, 6 * l, true),
                        qkv: Linear::new(init, "qkv", l, 3 * l, true),
                        proj: Linear::new(init, "proj", l, l, true),
                        fc1: Linear::new(init, "fc1", l, cfg.mlp_ratio * l, true),
                        fc2: Linear::new(init, "fc2", cfg.mlp_ratio * l, l, true),
                    })
                })
                .collect(),
            latent_out: Linear::zero(init, "latent_out", l, d, true),
            region_fc1: Linear::new(init, "region_fc1", l, l, true),
            region_fc2: Linear::zero(init, "region_fc2", l, cd, true),
            token_dim: d,
            cond_dim: cd,
        }))
    }

    /// Latent tokens `[B, R·Tr, L]` (region-major) with positional embeddings.
    pub fn embed_latents<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        tokens: &[Var<'g, T>],
        layout: &RegionLayout,
    ) -> Result<Var<'g, T>> {
        if tokens.len() != layout.count() {
            return Err(shape_err!("{} token sets for {} regions", tokens.len(), layout.count()));
        }
        let tr = layout.tokens_per_region();
        for t in tokens {
            let sh = t.shape();
            if sh.len() != 3 || sh[1] != tr || sh[2] != self.token_dim {
                return Err(shape_err!(
                    "region tokens {:?} do not match [B, {}, {}]",
                    sh,
                    tr,
                    self.token_dim
                ));
            }
        }
        let all = concat(tokens, 1)?;
        let l = self.cfg.latent_dim;
        let mut feats = Vec::new();
        for r in 0..layout.count() {
            for t in 0..tr {
                feats.extend(position_features(layout.token_coord(r, t), l));
            }
        }
        let n = layout.count() * tr;
        let feats = sess.graph.constant(Tensor::new(
            &[n, 3 * (l / 4)],
            feats.into_iter().map(T::from_f64_lossy).collect(),
        )?);
        let pos = self.latent_pos.fwd(sess, feats)?;
        self.latent_in.fwd(sess, all)?.add(pos)
    }

    /// `[R, L]`: shared learned base plus projected position of each region.
    pub fn region_tokens<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, layout: &RegionLayout) -> Result<Var<'g, T>> {
        let l = self.cfg.latent_dim;
        let feats: Vec<T> = (0..layout.count())
            .flat_map(|r| position_features(layout.region_coord(r), l))
            .map(T::from_f64_lossy)
            .collect();
        let feats = sess.graph.constant(Tensor::new(&[layout.count(), 3 * (l / 4)], feats)?);
        self.region_pos.fwd(sess, feats)?.add(sess.p(self.region_base))
    }

    fn block_fwd<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        blk: &ContextBlock,
        x: Var<'g, T>,
        e: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let sh = x.shape();
        let (b, s) = (sh[0], sh[1]);
        let l = self.cfg.latent_dim;
        let h = self.cfg.heads;
        let dh = l / h;
        let m = blk.ada.fwd(sess, e.silu())?;
        let chunk = |i: usize| m.narrow(1, i * l, l);
        let gate = |i: usize| chunk(i)?.reshape(&[b, 1, l]);
        let y = modulate(x.layer_norm(NORM_EPS), chunk(1)?, chunk(0)?)?;
        let qkv = blk
            .qkv
            .fwd(sess, y)?
            .reshape(&[b, s, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i| qkv.narrow(0, i, 1)?.reshape(&[b, h, s, dh]);
        let o = self.cfg.kernel.attend(part(0)?, part(1)?, part(2)?)?;
        let o = blk.proj.fwd(sess, o.permute(&[0, 2, 1, 3])?.reshape(&[b, s, l])?)?;
        let x = x.add(o.mul(gate(2)?)?)?;
        let y = modulate(x.layer_norm(NORM_EPS), chunk(4)?, chunk(3)?)?;
        let y = blk.fc2.fwd(sess, blk.fc1.fwd(sess, y)?.gelu())?;
        x.add(y.mul(gate(5)?)?)
    }

    /// Processes the bottleneck tokens of every region of one domain.
    /// `tokens[r]` is `[B, tokens_per_region, token_dim]`, `e` is `[B, cond_dim]`.
    pub fn fwd<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        tokens: &[Var<'g, T>],
        layout: &RegionLayout,
        e: Var<'g, T>,
    ) -> Result<ContextOut<'g, T>> {
        let latents = self.embed_latents(sess, tokens, layout)?;
        let b = latents.shape()[0];
        let r = layout.count();
        let l = self.cfg.latent_dim;
        let regions = self.region_tokens(sess, layout)?.reshape(&[1, r, l])?;
        let regions = if b == 1 {
            regions
        } else {
            regions.add(sess.graph.constant(Tensor::zeros(&[b, r, l])))?
        };
        let mut x = concat(&[regions, latents], 1)?;
        for blk in &self.blocks {
            x = self.block_fwd(sess, blk, x, e)?;
        }
        let x = x.layer_norm(NORM_EPS);
        let tr = layout.tokens_per_region();
        let reg = x.narrow(1, 0, r)?;
        let lat = self.latent_out.fwd(sess, x.narrow(1, r, r * tr)?)?;
        let off = self.region_fc2.fwd(sess, self.region_fc1.fwd(sess, reg)?.gelu())?;
        let mut out = ContextOut {
            latents: Vec::with_capacity(r),
            offsets: Vec::with_capacity(r),
        };
        for i in 0..r {
            out.latents.push(lat.narrow(1, i * tr, tr)?);
            out.offsets.push(off.narrow(1, i, 1)?.reshape(&[b, self.cond_dim])?);
        }
        Ok(out)
    }

    /// Maps each region token to its conditioning offset, bypassing the
    /// attention stack. `tokens` is `[R, latent_dim]`.
    pub fn region_offsets<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, tokens: Var<'g, T>) -> Result<Var<'g, T>> {
        self.region_fc2.fwd(sess, self.region_fc1.fwd(sess, tokens)?.gelu())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = [
            self.latent_in.params(),
            self.latent_pos.params(),
            self.region_pos.params(),
        ]
        .concat();
        p.push(self.region_base);
        for b in &self.blocks {
            p.extend(
                [
                    b.ada.params(),
                    b.qkv.params(),
                    b.proj.params(),
                    b.fc1.params(),
                    b.fc2.params(),
                ]
                .concat(),
            );
        }
        p.extend(
            [
                self.latent_out.params(),
                self.region_fc1.params(),
                self.region_fc2.params(),
            ]
            .concat(),
        );
        p
    }
}

/// Gradient routing for one domain forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    /// Per region: whether its encoder receives gradients.
    pub encoders: Vec<bool>,
    /// Per region: per decoder unit enable flags.
    pub decoders: Vec<[bool; DECODER_UNITS]>,
}

impl RegionMask {
    pub fn all(regions: usize) -> Self {
        RegionMask {
            encoders: vec![true; regions],
            decoders: vec![[true; DECODER_UNITS]; regions],
        }
    }
}

/// Reads crop `r` of a `[B, C, X, Y, Z]` domain.
pub fn crop<'g, T: Scalar>(x: Var<'g, T>, layout: &RegionLayout, r: usize) -> Result<Var<'g, T>> {
    let off = layout.region_offset(r);
    let size = layout.region;
    let mut v = x;
    for a in 0..3 {
        if size[a] != layout.domain[a] {
            v = v.narrow(2 + a, off[a], size[a])?;
        }
    }
    Ok(v)
}

/// Reassembles per-region outputs in region-index order.
pub fn assemble<'g, T: Scalar>(parts: &[Var<'g, T>], layout: &RegionLayout) -> Result<Var<'g, T>> {
    let [nx, ny, nz] = layout.regions();
    if parts.len() != nx * ny * nz {
        return Err(shape_err!("{} parts for {} regions", parts.len(), nx * ny * nz));
    }
    let mut xs = Vec::with_capacity(nx);
    for i in 0..nx {
        let mut ys = Vec::with_capacity(ny);
        for j in 0..ny {
            let zs = &parts[(i * ny + j) * nz..(i * ny + j + 1) * nz];
            ys.push(if nz == 1 { zs[0] } else { concat(zs, 4)? });
        }
        xs.push(if ny == 1 { ys[0] } else { concat(&ys, 3)? });
    }
    if nx == 1 {
        Ok(xs[0])
    } else {
        concat(&xs, 2)
    }
}

/// Independent per-crop forward, reassembled.
pub fn forward_crops<'g, T: Scalar>(
    model: &P3d,
    sess: &Session<'g, '_, T>,
    x: Var<'g, T>,
    conds: &[Conditioning],
    layout: &RegionLayout,
) -> Result<Var<'g, T>> {
    let mut outs = Vec::with_capacity(layout.count());
    for r in 0..layout.count() {
        outs.push(model.forward(sess, crop(x, layout, r)?, conds)?);
    }
    assemble(&outs, layout)
}

/// Per-crop encoders, the context model, and per-crop decoders modulated by
/// their region's offset. Crops are handled in the same order and with the
/// same operations as [`forward_crops`], so a context model whose outputs are
/// zero reproduces it bitwise.
pub fn forward_context<'g, T: Scalar>(
    model: &P3d,
    ctx: &ContextModel,
    sess: &Session<'g, '_, T>,
    x: Var<'g, T>,
    conds: &[Conditioning],
    layout: &RegionLayout,
    mask: &RegionMask,
) -> Result<Var<'g, T>> {
    check_mask(mask, layout)?;
    let e = model.embed(sess, conds)?;
    let encoded = encode_regions(model, sess, x, e, layout, &mask.encoders)?;
    decode_regions(model, ctx, sess, &encoded, e, layout, mask)
}

fn check_mask(mask: &RegionMask, layout: &RegionLayout) -> Result<()> {
    let r = layout.count();
    if mask.encoders.len() != r || mask.decoders.len() != r {
        return Err(shape_err!(
            "mask covers {} / {} regions, layout has {}",
            mask.encoders.len(),
            mask.decoders.len(),
            r
        ));
    }
    Ok(())
}

/// Encodes every crop of `x`. Encoders flagged off in `enabled` run with
/// constant parameters and a detached conditioning.
pub fn encode_regions<'g, T: Scalar>(
    model: &P3d,
    sess: &Session<'g, '_, T>,
    x: Var<'g, T>,
    e: Var<'g, T>,
    layout: &RegionLayout,
    enabled: &[bool],
) -> Result<Vec<Encoded<'g, T>>> {
    let mut encoded = Vec::with_capacity(layout.count());
    for i in 0..layout.count() {
        let c = crop(x, layout, i)?;
        let enc = if enabled.get(i).copied().unwrap_or(true) {
            model.encode(sess, c, e)?
        } else {
            sess.with_frozen(true, || model.encode(sess, c, e.detach()))?
        };
        encoded.push(enc);
    }
    Ok(encoded)
}

/// Runs the context model over encoded crops and decodes each crop with its
/// latent skip and conditioning offset.
pub fn decode_regions<'g, T: Scalar>(
    model: &P3d,
    ctx: &ContextModel,
    sess: &Session<'g, '_, T>,
    encoded: &[Encoded<'g, T>],
    e: Var<'g, T>,
    layout: &RegionLayout,
    mask: &RegionMask,
) -> Result<Var<'g, T>> {
    check_mask(mask, layout)?;
    if encoded.len() != layout.count() {
        return Err(shape_err!(
            "{} encoded crops for {} regions",
            encoded.len(),
            layout.count()
        ));
    }
    let tokens: Vec<Var<'g, T>> = encoded.iter().map(|enc| enc.tokens).collect();
    let out = ctx.fwd(sess, &tokens, layout, e)?;
    let mut outs = Vec::with_capacity(encoded.len());
    for (i, enc) in encoded.iter().enumerate() {
        let t = enc.tokens.add(out.latents[i])?;
        let ei = e.add(out.offsets[i])?;
        outs.push(model.decode(sess, t, &enc.residuals, enc.grid, ei, &mask.decoders[i])?);
    }
    assemble(&outs, layout)
}

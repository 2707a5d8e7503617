use rand::Rng;

use super::cond::{CondEmbedder, Conditioning};
use super::conv::{ConvDecoder, ConvEncoder, DECODER_CONV_UNITS};
use super::layers::Linear;
use super::transformer::{TransformerBlock, WindowPlan};
use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Scalar, Session, Tensor, Var};

/// Maskable decoder units: the unpatchify projection, then the conv decoder units.
pub const DECODER_UNITS: usize = 1 + DECODER_CONV_UNITS;

/// Backbone: conditioning embedder, conv encoder, token transformer, conv decoder.
#[derive(Clone, Debug)]
pub struct P3d {
    pub cfg: ModelConfig,
    cond: CondEmbedder,
    enc: ConvEncoder,
    patch_in: Linear,
    blocks: Vec<TransformerBlock>,
    patch_out: Linear,
    dec: ConvDecoder,
}

/// Bottleneck state of one batch of crops.
pub struct Encoded<'g, T: Scalar> {
    /// `[B, T, transformer_dim]` after the transformer stage.
    pub tokens: Var<'g, T>,
    pub residuals: Vec<Var<'g, T>>,
    pub grid: [usize; 3],
}

impl P3d {
    /// Registers all parameters under the `backbone.` prefix.
    pub fn new<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, rng);
        let c = cfg.embed_dims[2];
        let pv = c * cfg.patch.pow(3);
        let d = cfg.transformer_dim;
        Ok(init.scoped("backbone", |init| P3d {
            cfg: cfg.clone(),
            cond: CondEmbedder::new(init, cfg),
            enc: ConvEncoder::new(init, cfg),
            patch_in: Linear::new(init, "patch_in", pv, d, true),
            blocks: (0..cfg.depth)
                .map(|i| TransformerBlock::new(init, &format!("block{i}"), cfg))
                .collect(),
            patch_out: Linear::new(init, "patch_out", d, pv, true),
            dec: ConvDecoder::new(init, cfg),
        }))
    }

    pub fn embed<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, conds: &[Conditioning]) -> Result<Var<'g, T>> {
        self.cond.fwd(sess, conds)
    }

    pub fn window_plan(&self, grid: [usize; 3]) -> Result<WindowPlan> {
        WindowPlan::new(
            grid,
            self.cfg.window,
            self.cfg.pad_mode == crate::numerics::PadMode::Circular,
        )
    }

    /// `[B, C, X, Y, Z]` → `[B, T, C·p³]`, tokens in row-major grid order.
    fn patchify<'g, T: Scalar>(&self, x: Var<'g, T>, grid: [usize; 3]) -> Result<Var<'g, T>> {
        let sh = x.shape();
        let (b, c, p) = (sh[0], sh[1], self.cfg.patch);
        let [gx, gy, gz] = grid;
        x.reshape(&[b, c, gx, p, gy, p, gz, p])?
            .permute(&[0, 2, 4, 6, 1, 3, 5, 7])?
            .reshape(&[b, gx * gy * gz, c * p * p * p])
    }

    fn unpatchify<'g, T: Scalar>(&self, t: Var<'g, T>, grid: [usize; 3]) -> Result<Var<'g, T>> {
        let b = t.shape()[0];
        let (c, p) = (self.cfg.embed_dims[2], self.cfg.patch);
        let [gx, gy, gz] = grid;
        t.reshape(&[b, gx, gy, gz, c, p, p, p])?
            .permute(&[0, 4, 1, 5, 2, 6, 3, 7])?
            .reshape(&[b, c, gx * p, gy * p, gz * p])
    }

    /// Conv encoder, patch embedding and transformer stage.
    pub fn encode<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        x: Var<'g, T>,
        e: Var<'g, T>,
    ) -> Result<Encoded<'g, T>> {
        let sh = x.shape();
        if sh.len() != 5 || sh[1] != self.cfg.in_channels {
            return Err(shape_err!(
                "model input must be [B, {}, X, Y, Z], got {:?}",
                self.cfg.in_channels,
                sh
            ));
        }
        let grid = self.cfg.token_grid([sh[2], sh[3], sh[4]])?;
        let plan = self.window_plan(grid)?;
        let out = self.enc.fwd(sess, x, e, self.cfg.pad_mode)?;
        let mut tokens = self.patch_in.fwd(sess, self.patchify(out.features, grid)?)?;
        for blk in &self.blocks {
            tokens = blk.fwd(sess, tokens, e, &plan)?;
        }
        Ok(Encoded {
            tokens,
            residuals: out.residuals,
            grid,
        })
    }

    /// Decoder from bottleneck tokens. `enabled[u]` false holds unit `u`'s
    /// parameters constant while gradients still flow through its activations.
    pub fn decode<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        tokens: Var<'g, T>,
        residuals: &[Var<'g, T>],
        grid: [usize; 3],
        e: Var<'g, T>,
        enabled: &[bool],
    ) -> Result<Var<'g, T>> {
        if enabled.len() != DECODER_UNITS {
            return Err(shape_err!(
                "expected {} decoder flags, got {}",
                DECODER_UNITS,
                enabled.len()
            ));
        }
        let f = sess.with_frozen(!enabled[0], || self.patch_out.fwd(sess, tokens))?;
        let f = self.unpatchify(f, grid)?;
        self.dec.fwd(sess, f, residuals, e, self.cfg.pad_mode, &enabled[1..])
    }

    /// Full forward pass `[B, in, X, Y, Z]` → `[B, out, X, Y, Z]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        x: Var<'g, T>,
        conds: &[Conditioning],
    ) -> Result<Var<'g, T>> {
        if conds.len() != x.shape()[0] {
            return Err(shape_err!("{} conditionings for batch {}", conds.len(), x.shape()[0]));
        }
        let e = self.embed(sess, conds)?;
        let enc = self.encode(sess, x, e)?;
        self.decode(sess, enc.tokens, &enc.residuals, enc.grid, e, &[true; DECODER_UNITS])
    }

    /// Gradient-free evaluation.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        conds: &[Conditioning],
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let sess = Session::new(&g, store);
        sess.with_frozen(true, || {
            let y = self.forward(&sess, g.constant(x.clone()), conds)?;
            Ok((*y.value()).clone())
        })
    }

    /// Parameters used by [`P3d::encode`] (conv encoder, patch embedding, transformer).
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut p = self.enc.params();
        p.extend(self.patch_in.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    pub fn cond_params(&self) -> Vec<ParamId> {
        self.cond.params()
    }

    pub fn transformer_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    /// Parameters of each decoder unit, in the order of the `enabled` flags.
    pub fn decoder_unit_params(&self) -> Vec<Vec<ParamId>> {
        let mut out = vec![self.patch_out.params()];
        out.extend(self.dec.unit_params());
        out
    }
}

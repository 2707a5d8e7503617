//! Autoregressive rollout under the tiling strategies.

use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, P3d};
use crate::context::{forward_context, ContextModel, RegionLayout, RegionMask};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Session, Tensor};
use crate::training::pad_channels;

/// How one rollout step covers the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RolloutStrategy {
    /// Independent forwards on tiles of this size, reassembled. A tile equal
    /// to the domain is a single whole-domain forward.
    Tiled { tile: [usize; 3] },
    /// Per-region encoders and decoders joined by the context model.
    Context { region: [usize; 3] },
}

fn drop_batch<T: Scalar>(y: Tensor<T>) -> Result<Tensor<T>> {
    let shape = y.shape()[1..].to_vec();
    y.reshape(&shape)
}

/// A model and the parameters it runs with.
pub struct Surrogate<'a, T> {
    pub model: &'a P3d,
    pub context: Option<&'a ContextModel>,
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> Surrogate<'_, T> {
    /// One step on a `[C, X, Y, Z]` state with `C ≤ in_channels`; returns the
    /// first `C` output channels.
    pub fn step(&self, u: &Tensor<T>, cond: &Conditioning, strategy: RolloutStrategy) -> Result<Tensor<T>> {
        let sh = u.shape();
        if sh.len() != 4 {
            return Err(shape_err!("rollout state must be [C, X, Y, Z], got {:?}", sh));
        }
        let (c, dims) = (sh[0], [sh[1], sh[2], sh[3]]);
        if c > self.model.cfg.out_channels {
            return Err(shape_err!(
                "state has {} channels, model predicts {}",
                c,
                self.model.cfg.out_channels
            ));
        }
        let x = pad_channels(u, self.model.cfg.in_channels)?;
        let spacing = self.model.cfg.token_spacing();
        let conds = std::slice::from_ref(cond);
        let out = match strategy {
            RolloutStrategy::Tiled { tile } => {
                let layout = RegionLayout::new(dims, tile, spacing)?;
                let mut out = Tensor::zeros(&[self.model.cfg.out_channels, dims[0], dims[1], dims[2]]);
                for r in 0..layout.count() {
                    let o = layout.region_offset(r);
                    let part = x.read_block(&[0, o[0], o[1], o[2]], &[x.shape()[0], tile[0], tile[1], tile[2]])?;
                    let mut shape = vec![1];
                    shape.extend_from_slice(part.shape());
                    let y = self.model.predict(self.store, &part.reshape(&shape)?, conds)?;
                    let y = drop_batch(y)?;
                    out.write_block(&y, &[0, o[0], o[1], o[2]])?;
                }
                out
            }
            RolloutStrategy::Context { region } => {
                let ctx = self
                    .context
                    .ok_or_else(|| Error::Config("context strategy needs a context model".into()))?;
                let layout = RegionLayout::new(dims, region, spacing)?;
                let g = Graph::new();
                let sess = Session::new(&g, self.store);
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                let xv = g.constant(x.reshape(&shape)?);
                let y = sess.with_frozen(true, || {
                    forward_context(
                        self.model,
                        ctx,
                        &sess,
                        xv,
                        conds,
                        &layout,
                        &RegionMask::all(layout.count()),
                    )
                })?;
                drop_batch((*y.value()).clone())?
            }
        };
        out.narrow(0, 0, c)
    }

    /// States after each of `steps` steps, starting from `u0`.
    pub fn rollout(
        &self,
        u0: &Tensor<T>,
        cond: &Conditioning,
        steps: usize,
        strategy: RolloutStrategy,
    ) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(steps);
        for k in 0..steps {
            let prev = if k == 0 { u0 } else { &out[k - 1] };
            let next = self.step(prev, cond, strategy)?;
            if !next.all_finite() {
                return Err(Error::NonFinite(format!("rollout state at step {}", k + 1)));
            }
            out.push(next);
        }
        Ok(out)
    }
}

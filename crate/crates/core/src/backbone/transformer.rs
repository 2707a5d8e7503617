//! Windowed self-attention blocks with adaptive layer norm conditioning.

use rand::Rng;

use super::layers::{modulate, Linear, NORM_EPS};
use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::numerics::{attention, Init, ParamId, Scalar, Session, Tensor, Var};

/// Geometry of the window partition for one token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    /// Axes on which a window covers the whole periodic grid, so offsets wrap.
    pub periodic: [bool; 3],
}

impl WindowPlan {
    /// Windows are `min(window, extent)` tokens per axis.
    pub fn new(grid: [usize; 3], window: usize, circular: bool) -> Result<Self> {
        let w = grid.map(|g| window.min(g));
        for a in 0..3 {
            if grid[a] == 0 || grid[a] % w[a] != 0 {
                return Err(shape_err!("token grid {:?} not divisible by window {:?}", grid, w));
            }
        }
        let periodic = std::array::from_fn(|a| circular && w[a] == grid[a] && grid[a] > 1);
        Ok(WindowPlan {
            grid,
            window: w,
            periodic,
        })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn windows(&self) -> usize {
        (0..3).map(|a| self.grid[a] / self.window[a]).product()
    }

    fn table_extent(&self, a: usize) -> usize {
        2 * self.window[a] - 1
    }

    pub fn table_len(&self) -> usize {
        (0..3).map(|a| self.table_extent(a)).product()
    }

    fn offset(&self, a: usize, d: isize) -> isize {
        if !self.periodic[a] {
            return d;
        }
        let w = self.window[a] as isize;
        let m = d.rem_euclid(w);
        if m > w / 2 {
            m - w
        } else {
            m
        }
    }

    /// Log-spaced features of every representable 3-D offset, `[table_len, 3]`.
    pub fn offset_features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.table_len() * 3);
        let ext: [usize; 3] = std::array::from_fn(|a| self.table_extent(a));
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for l in 0..ext[2] {
                    for (a, v) in [i, j, l].into_iter().enumerate() {
                        let d = v as f64 - (self.window[a] as f64 - 1.0);
                        let denom = if self.window[a] > 1 {
                            (self.window[a] as f64).log2()
                        } else {
                            1.0
                        };
                        out.push(d.signum() * (1.0 + d.abs()).log2() / denom);
                    }
                }
            }
        }
        out
    }

    /// Table row for every (query, key) pair inside one window, row-major.
    pub fn pair_index(&self) -> Vec<usize> {
        let w = self.window;
        let coords: Vec<[isize; 3]> = (0..self.tokens_per_window())
            .map(|t| {
                [
                    (t / (w[1] * w[2])) as isize,
                    ((t / w[2]) % w[1]) as isize,
                    (t % w[2]) as isize,
                ]
            })
            .collect();
        let ext: [usize; 3] = std::array::from_fn(|a| self.table_extent(a));
        let mut idx = Vec::with_capacity(coords.len() * coords.len());
        for ci in &coords {
            for cj in &coords {
                let d: [usize; 3] =
                    std::array::from_fn(|a| (self.offset(a, cj[a] - ci[a]) + w[a] as isize - 1) as usize);
                idx.push((d[0] * ext[1] + d[1]) * ext[2] + d[2]);
            }
        }
        idx
    }

    /// `[B, T, D]` → `[B·windows, tokens_per_window, D]`.
    pub fn partition<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let sh = x.shape();
        let (b, d) = (sh[0], sh[2]);
        let [gx, gy, gz] = self.grid;
        let [wx, wy, wz] = self.window;
        if sh[1] != gx * gy * gz {
            return Err(shape_err!("{} tokens do not match grid {:?}", sh[1], self.grid));
        }
        x.reshape(&[b, gx / wx, wx, gy / wy, wy, gz / wz, wz, d])?
            .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
            .reshape(&[b * self.windows(), self.tokens_per_window(), d])
    }

    /// Inverse of [`WindowPlan::partition`].
    pub fn merge<'g, T: Scalar>(&self, x: Var<'g, T>, batch: usize) -> Result<Var<'g, T>> {
        let d = x.shape()[2];
        let [gx, gy, gz] = self.grid;
        let [wx, wy, wz] = self.window;
        x.reshape(&[batch, gx / wx, gy / wy, gz / wz, wx, wy, wz, d])?
            .permute(&[0, 1, 4, 2, 5, 3, 6, 7])?
            .reshape(&[batch, gx * gy * gz, d])
    }
}

/// Multi-head attention inside non-overlapping token windows with a learned
/// continuous relative-position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias1: Linear,
    bias2: Linear,
    heads: usize,
    dim: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.transformer_dim;
        init.scoped(name, |init| WindowAttention {
            qkv: Linear::new(init, "qkv", d, 3 * d, true),
            proj: Linear::new(init, "proj", d, d, true),
            bias1: Linear::new(init, "bias_fc1", 3, cfg.bias_hidden, true),
            bias2: Linear::new(init, "bias_fc2", cfg.bias_hidden, cfg.heads, true),
            heads: cfg.heads,
            dim: d,
        })
    }

    /// Per-head bias `[H, Tw, Tw]`.
    pub fn bias<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, plan: &WindowPlan) -> Result<Var<'g, T>> {
        let feats = plan.offset_features().into_iter().map(T::from_f64_lossy).collect();
        let table = sess.graph.constant(Tensor::new(&[plan.table_len(), 3], feats)?);
        let table = self.bias2.fwd(sess, self.bias1.fwd(sess, table)?.gelu())?;
        let tw = plan.tokens_per_window();
        table
            .gather_rows(&plan.pair_index())?
            .transpose(0, 1)?
            .reshape(&[self.heads, tw, tw])
    }

    pub fn fwd<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        x: Var<'g, T>,
        plan: &WindowPlan,
    ) -> Result<Var<'g, T>> {
        let b = x.shape()[0];
        let (h, d) = (self.heads, self.dim);
        let dh = d / h;
        let tw = plan.tokens_per_window();
        let xw = plan.partition(x)?;
        let bw = xw.shape()[0];
        let qkv = self
            .qkv
            .fwd(sess, xw)?
            .reshape(&[bw, tw, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i| qkv.narrow(0, i, 1)?.reshape(&[bw, h, tw, dh]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let bias = self.bias(sess, plan)?;
        let o = attention(q, k, v, Some(bias))?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bw, tw, d])?;
        plan.merge(self.proj.fwd(sess, o)?, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.qkv.params(),
            self.proj.params(),
            self.bias1.params(),
            self.bias2.params(),
        ]
        .concat()
    }
}

/// Pre-norm attention + MLP block with adaLN-Zero modulation; identity at init.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ada: Linear,
    attn: WindowAttention,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.transformer_dim;
        init.scoped(name, |init| TransformerBlock {
            ada: Linear::zero(init, "ada", cfg.cond_dim, 6 * d, true),
            attn: WindowAttention::new(init, "attn", cfg),
            fc1: Linear::new(init, "fc1", d, cfg.mlp_ratio * d, true),
            fc2: Linear::new(init, "fc2", cfg.mlp_ratio * d, d, true),
            dim: d,
        })
    }

    /// `x: [B, T, D]`, `e: [B, cond_dim]`.
    pub fn fwd<'g, T: Scalar>(
        &self,
        sess: &Session<'g, '_, T>,
        x: Var<'g, T>,
        e: Var<'g, T>,
        plan: &WindowPlan,
    ) -> Result<Var<'g, T>> {
        let d = self.dim;
        let b = x.shape()[0];
        let m = self.ada.fwd(sess, e.silu())?;
        let chunk = |i: usize| m.narrow(1, i * d, d);
        let gate = |i: usize| chunk(i)?.reshape(&[b, 1, d]);
        let h = modulate(x.layer_norm(NORM_EPS), chunk(1)?, chunk(0)?)?;
        let x = x.add(self.attn.fwd(sess, h, plan)?.mul(gate(2)?)?)?;
        let h = modulate(x.layer_norm(NORM_EPS), chunk(4)?, chunk(3)?)?;
        let h = self.fc2.fwd(sess, self.fc1.fwd(sess, h)?.gelu())?;
        x.add(h.mul(gate(5)?)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.ada.params(),
            self.attn.params(),
            self.fc1.params(),
            self.fc2.params(),
        ]
        .concat()
    }
}

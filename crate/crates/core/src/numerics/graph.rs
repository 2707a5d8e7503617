//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to [`Var`] handles. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self as k, AttnDims, ConvGeom};
use super::tensor::{concat_data, inverse_perm, permute_data, s, Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Zero,
    Circular,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Gelu(usize),
    Silu(usize),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Softmax(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: usize,
        rstd: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        bias: Option<usize>,
        probs: Vec<T>,
    },
    Gather {
        table: usize,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get_id(v.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor<T>> {
        self.grads
            .get(id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(&self.shapes[id], g.clone()).expect("gradient shape"))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_, T> {
        Var { graph: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..n).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
        }
        let shapes = nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let rg = |id: usize| nodes[id].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if rg(*a) {
                accumulate(grads, *a, k::reduce_to_shape(g, out_shape, val(*a).shape()));
            }
            if rg(*b) {
                let mut gb = k::reduce_to_shape(g, out_shape, val(*b).shape());
                if sign < T::zero() {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if rg(*a) {
                let ga = k::reduce_weighted(g, out_shape, Some((vb.data(), vb.shape())), va.shape());
                accumulate(grads, *a, ga);
            }
            if rg(*b) {
                let gb = k::reduce_weighted(g, out_shape, Some((va.data(), va.shape())), vb.shape());
                accumulate(grads, *b, gb);
            }
        }
        Op::Scale(x, c) => {
            accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
        }
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
        Op::Gelu(x) => {
            let gx = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| gv * k::gelu_grad(xv))
                .collect();
            accumulate(grads, *x, gx);
        }
        Op::Silu(x) => {
            let gx = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| gv * k::silu_grad(xv))
                .collect();
            accumulate(grads, *x, gx);
        }
        Op::SumAll(x) => accumulate(grads, *x, vec![g[0]; val(*x).numel()]),
        Op::MeanAll(x) => {
            let n = val(*x).numel();
            accumulate(grads, *x, vec![g[0] / s::<T>(n as f64); n]);
        }
        Op::Permute(x, perm) => {
            let (_, gx) = permute_data(g, out_shape, &inverse_perm(perm)).expect("valid permutation");
            accumulate(grads, *x, gx);
        }
        Op::Concat(parts, axis) => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if rg(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(grads, p, gp);
                }
                start += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let (full, len) = (xs[*axis], out_shape[*axis]);
            let mut gx = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, gx);
        }
        Op::Softmax(x) => {
            let d = *out_shape.last().unwrap();
            accumulate(grads, *x, k::softmax_backward_rows(node.value.data(), g, d));
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(*x), val(*w));
            let (f, gg) = (vw.shape()[0], vw.shape()[1]);
            let n = vx.numel() / f;
            let (gx, gw, gb) = k::linear_backward(
                g,
                vx.data(),
                vw.data(),
                n,
                f,
                gg,
                rg(*x),
                rg(*w),
                b.map(|b| rg(b)).unwrap_or(false),
            );
            if let Some(gx) = gx {
                accumulate(grads, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, *w, gw);
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                accumulate(grads, *b, gb);
            }
        }
        Op::Conv3d { x, w, b, geom } => {
            let vx = val(*x);
            let batch = vx.shape()[0];
            let (gx, gw, gb) = k::conv3d_backward(
                geom,
                batch,
                g,
                vx.data(),
                val(*w).data(),
                rg(*x),
                rg(*w),
                b.map(|b| rg(b)).unwrap_or(false),
            );
            if let Some(gx) = gx {
                accumulate(grads, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, *w, gw);
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                accumulate(grads, *b, gb);
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let vx = val(*x);
            let sh = vx.shape();
            let (batch, c) = (sh[0], sh[1]);
            let sp: usize = sh[2..].iter().product();
            let cpg = c / groups;
            let glen = cpg * sp;
            let gam = val(*gamma).data();
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            let mut gx = vec![T::zero(); vx.numel()];
            let n = s::<T>(glen as f64);
            for bi in 0..batch {
                for gi in 0..*groups {
                    let gid = bi * groups + gi;
                    let (m, r) = (mean[gid], rstd[gid]);
                    let base = gid * glen;
                    let mut sum_gxh = T::zero();
                    let mut sum_gxh_xh = T::zero();
                    for cc in 0..cpg {
                        let ch = gi * cpg + cc;
                        let off = base + cc * sp;
                        let mut sg = T::zero();
                        let mut sgx = T::zero();
                        for j in 0..sp {
                            let xh = (vx.data()[off + j] - m) * r;
                            let gy = g[off + j];
                            sg += gy;
                            sgx += gy * xh;
                        }
                        ggamma[ch] += sgx;
                        gbeta[ch] += sg;
                        sum_gxh += sg * gam[ch];
                        sum_gxh_xh += sgx * gam[ch];
                    }
                    let mg = sum_gxh / n;
                    let mgx = sum_gxh_xh / n;
                    for cc in 0..cpg {
                        let ch = gi * cpg + cc;
                        let off = base + cc * sp;
                        for j in 0..sp {
                            let xh = (vx.data()[off + j] - m) * r;
                            gx[off + j] = r * (g[off + j] * gam[ch] - mg - xh * mgx);
                        }
                    }
                }
            }
            if rg(*x) {
                accumulate(grads, *x, gx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, ggamma);
            }
            if rg(*beta) {
                accumulate(grads, *beta, gbeta);
            }
        }
        Op::LayerNorm { x, rstd } => {
            let d = *out_shape.last().unwrap();
            let y = node.value.data();
            let n = s::<T>(d as f64);
            let mut gx = vec![T::zero(); y.len()];
            for (((yr, gr), xr), &r) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).zip(rstd) {
                let mg = gr.iter().copied().sum::<T>() / n;
                let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / n;
                for ((o, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
                    *o = r * (gv - mg - yv * mgy);
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Attention {
            q,
            k: kk,
            v,
            bias,
            probs,
        } => {
            let sh = val(*q).shape();
            let dims = AttnDims {
                bh: sh[0] * sh[1],
                heads: sh[1],
                t: sh[2],
                dh: sh[3],
            };
            let (gq, gk, gv, gb) = k::attention_backward(
                g,
                val(*q).data(),
                val(*kk).data(),
                val(*v).data(),
                probs,
                &dims,
                bias.map(|b| rg(b)).unwrap_or(false),
            );
            if rg(*q) {
                accumulate(grads, *q, gq);
            }
            if rg(*kk) {
                accumulate(grads, *kk, gk);
            }
            if rg(*v) {
                accumulate(grads, *v, gv);
            }
            if let (Some(b), Some(gb)) = (bias, gb) {
                accumulate(grads, *b, gb);
            }
        }
        Op::Gather { table, idx } => {
            let vt = val(*table);
            let f = vt.shape()[1];
            let mut gt = vec![T::zero(); vt.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..f {
                    gt[i * f + j] += g[r * f + j];
                }
            }
            accumulate(grads, *table, gt);
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(shape_err!("operands belong to different graphs"))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let (shape, data) = k::broadcast_binary(a.data(), a.shape(), b.data(), b.shape(), f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Tensor::new(&shape, data)?, op, rg))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = s::<T>(c);
        self.unary(self.value().map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = s::<T>(c);
        self.unary(self.value().map(|v| v + c), Op::AddScalar(self.id))
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.unary(self.value().map(k::gelu), Op::Gelu(self.id))
    }

    pub fn silu(self) -> Var<'g, T> {
        self.unary(self.value().map(k::silu), Op::Silu(self.id))
    }

    pub fn sqr(self) -> Result<Var<'g, T>> {
        self.mul(self)
    }

    pub fn sum(self) -> Var<'g, T> {
        self.unary(Tensor::scalar(self.value().sum()), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        self.unary(Tensor::scalar(self.value().mean()), Op::MeanAll(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value().permute(perm)?;
        Ok(self.unary(v, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g, T>> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(shape_err!("transpose axes {} {} for rank {}", a, b, perm.len()));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.unary(
            v,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let total: usize = sizes.iter().sum();
        if self.shape().get(axis) != Some(&total) {
            return Err(shape_err!(
                "split sizes {:?} do not cover axis {} of {:?}",
                sizes,
                axis,
                self.shape()
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let v = self.narrow(axis, start, n);
                start += n;
                v
            })
            .collect()
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let mut v = (*self.value()).clone();
        let d = *v.shape().last().unwrap_or(&1);
        k::softmax_rows(v.data_mut(), d);
        self.unary(v, Op::Softmax(self.id))
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm(self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let (y, rstd) = k::layer_norm_forward(x.data(), d, s(eps));
        self.unary(
            Tensor::new(x.shape(), y).expect("same shape"),
            Op::LayerNorm { x: self.id, rstd },
        )
    }

    /// `x[..., F] · w[F, G] + b[G]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        self.same_graph(&w)?;
        let (x, wv) = (self.value(), w.value());
        if wv.ndim() != 2 {
            return Err(shape_err!("linear weight must be 2-D, got {:?}", wv.shape()));
        }
        let (f, g) = (wv.shape()[0], wv.shape()[1]);
        if x.shape().last() != Some(&f) {
            return Err(shape_err!("linear input {:?} vs weight {:?}", x.shape(), wv.shape()));
        }
        let bv = match b {
            Some(b) => {
                self.same_graph(&b)?;
                let bv = b.value();
                if bv.shape() != [g] {
                    return Err(shape_err!("linear bias {:?} vs out features {}", bv.shape(), g));
                }
                Some(bv)
            }
            None => None,
        };
        let n = x.numel() / f;
        let out = k::linear_forward(x.data(), wv.data(), bv.as_ref().map(|b| b.data()), n, f, g);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = g;
        let rg = self.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.graph.push(
            Tensor::new(&shape, out)?,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    /// 3-D convolution with `padding = (k-1)/2`.
    pub fn conv3d(self, w: Var<'g, T>, b: Option<Var<'g, T>>, stride: usize, pad: PadMode) -> Result<Var<'g, T>> {
        self.same_graph(&w)?;
        let (x, wv) = (self.value(), w.value());
        let (xs, ws) = (x.shape(), wv.shape());
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(shape_err!("conv3d input {:?} incompatible with weight {:?}", xs, ws));
        }
        let geom = ConvGeom::new(
            xs[1],
            ws[0],
            ws[2],
            stride,
            pad == PadMode::Circular,
            [xs[2], xs[3], xs[4]],
        )?;
        let bv = match b {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [ws[0]] {
                    return Err(shape_err!("conv3d bias {:?} vs {} output channels", bv.shape(), ws[0]));
                }
                Some(bv)
            }
            None => None,
        };
        let out = k::conv3d_forward(&geom, xs[0], x.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let [ox, oy, oz] = geom.out_dims;
        let rg = self.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.graph.push(
            Tensor::new(&[xs[0], ws[0], ox, oy, oz], out)?,
            Op::Conv3d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Group normalization of `[B, C, ...]` with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let sh = x.shape();
        if sh.len() < 2 || groups == 0 || sh[1] % groups != 0 {
            return Err(shape_err!(
                "group_norm: {} groups do not divide channels of {:?}",
                groups,
                sh
            ));
        }
        let (batch, c) = (sh[0], sh[1]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!("group_norm affine shapes must be [{}]", c));
        }
        let sp: usize = sh[2..].iter().product();
        let glen = c / groups * sp;
        let (mean, rstd) = k::group_stats(x.data(), batch, groups, glen, s(eps));
        let (gv, bv) = (gamma.value(), beta.value());
        let cpg = c / groups;
        let mut out = vec![T::zero(); x.numel()];
        for bi in 0..batch {
            for ch in 0..c {
                let gid = bi * groups + ch / cpg;
                let (m, r) = (mean[gid], rstd[gid]);
                let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                let off = (bi * c + ch) * sp;
                for (o, &v) in out[off..off + sp].iter_mut().zip(&x.data()[off..off + sp]) {
                    *o = (v - m) * r * ga + be;
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.graph.push(
            Tensor::new(sh, out)?,
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of a `[N, F]` table selected by `idx`, giving `[idx.len(), F]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g, T>> {
        let t = self.value();
        if t.ndim() != 2 {
            return Err(shape_err!("gather_rows needs a 2-D table, got {:?}", t.shape()));
        }
        let (n, f) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            if i >= n {
                return Err(shape_err!("gather index {} out of range {}", i, n));
            }
            out.extend_from_slice(&t.data()[i * f..(i + 1) * f]);
        }
        Ok(self.unary(
            Tensor::new(&[idx.len(), f], out)?,
            Op::Gather {
                table: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Stop-gradient copy.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}

/// Concatenation along `axis`.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let g = first.graph;
    for p in parts {
        first.same_graph(p)?;
    }
    let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<(&[usize], &[T])> = vals.iter().map(|v| (v.shape(), v.data())).collect();
    let (shape, data) = concat_data(&refs, axis)?;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(g.push(
        Tensor::new(&shape, data)?,
        Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        rg,
    ))
}

/// Scaled dot-product attention on `[B, H, T, Dh]` with optional additive
/// `[H, T, T]` bias: `softmax(q·kᵀ/√Dh + bias)·v`.
pub fn attention<'g, T: Scalar>(
    q: Var<'g, T>,
    k_: Var<'g, T>,
    v: Var<'g, T>,
    bias: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    q.same_graph(&k_)?;
    q.same_graph(&v)?;
    let sh = q.shape();
    if sh.len() != 4 || k_.shape() != sh || v.shape() != sh {
        return Err(shape_err!(
            "attention expects equal [B,H,T,Dh] shapes, got {:?} {:?} {:?}",
            sh,
            k_.shape(),
            v.shape()
        ));
    }
    let dims = AttnDims {
        bh: sh[0] * sh[1],
        heads: sh[1],
        t: sh[2],
        dh: sh[3],
    };
    let bias_val = match bias {
        Some(b) => {
            if b.shape() != [sh[1], sh[2], sh[2]] {
                return Err(shape_err!(
                    "attention bias {:?} must be [{}, {}, {}]",
                    b.shape(),
                    sh[1],
                    sh[2],
                    sh[2]
                ));
            }
            Some(b.value())
        }
        None => None,
    };
    let (qv, kv, vv) = (q.value(), k_.value(), v.value());
    let (out, probs) = k::attention_forward(
        qv.data(),
        kv.data(),
        vv.data(),
        bias_val.as_ref().map(|b| b.data()),
        &dims,
    );
    let rg = q.requires_grad()
        || k_.requires_grad()
        || v.requires_grad()
        || bias.map(|b| b.requires_grad()).unwrap_or(false);
    Ok(q.graph.push(
        Tensor::new(&sh, out)?,
        Op::Attention {
            q: q.id,
            k: k_.id,
            v: v.id,
            bias: bias.map(|b| b.id),
            probs,
        },
        rg,
    ))
}

/// Rearranges `[B, r³·C, X, Y, Z]` into `[B, C, rX, rY, rZ]`. Channel
/// `c·r³ + (i·r² + j·r + l)` at `(x, y, z)` lands at channel `c`, voxel
/// `(r·x+i, r·y+j, r·z+l)`.
pub fn pixel_shuffle_3d<'g, T: Scalar>(x: Var<'g, T>, r: usize) -> Result<Var<'g, T>> {
    let sh = x.shape();
    let r3 = r * r * r;
    if sh.len() != 5 || r == 0 || sh[1] % r3 != 0 {
        return Err(shape_err!(
            "pixel_shuffle_3d: channels of {:?} not divisible by {}",
            sh,
            r3
        ));
    }
    let (b, c, nx, ny, nz) = (sh[0], sh[1] / r3, sh[2], sh[3], sh[4]);
    x.reshape(&[b, c, r, r, r, nx, ny, nz])?
        .permute(&[0, 1, 5, 2, 6, 3, 7, 4])?
        .reshape(&[b, c, nx * r, ny * r, nz * r])
}

/// Inverse of [`pixel_shuffle_3d`].
pub fn pixel_unshuffle_3d<'g, T: Scalar>(x: Var<'g, T>, r: usize) -> Result<Var<'g, T>> {
    let sh = x.shape();
    if sh.len() != 5 || r == 0 || sh[2..].iter().any(|&d| d % r != 0) {
        return Err(shape_err!(
            "pixel_unshuffle_3d: extents of {:?} not divisible by {}",
            sh,
            r
        ));
    }
    let (b, c, nx, ny, nz) = (sh[0], sh[1], sh[2] / r, sh[3] / r, sh[4] / r);
    x.reshape(&[b, c, nx, r, ny, r, nz, r])?
        .permute(&[0, 1, 3, 5, 7, 2, 4, 6])?
        .reshape(&[b, c * r * r * r, nx, ny, nz])
}

/// Mean squared error between two equally shaped variables.
pub fn mse<'g, T: Scalar>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    if pred.shape() != target.shape() {
        return Err(shape_err!(
            "mse shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(pred.sub(target)?.sqr()?.mean())
}

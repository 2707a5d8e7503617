//! Raw forward/backward kernels on slices. The autodiff graph calls into these.

use rayon::prelude::*;

use super::tensor::{s, strides, Scalar};
use crate::error::{shape_err, Result};

// ---------------------------------------------------------------------------
// Broadcasting

/// Output shape for numpy-style broadcasting (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 for broadcast dims).
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let st = strides(shape);
    let mut v = vec![0; nd];
    for i in 0..shape.len() {
        let o = nd - shape.len() + i;
        v[o] = if shape[i] == 1 { 0 } else { st[i] };
    }
    v
}

/// Merges adjacent dims that are contiguous for every operand.
fn collapse(shape: &[usize], operands: &mut [Vec<usize>]) -> Vec<usize> {
    let mut sh: Vec<usize> = Vec::new();
    let mut sts: Vec<Vec<usize>> = vec![Vec::new(); operands.len()];
    for d in 0..shape.len() {
        if shape[d] == 1 {
            continue;
        }
        let can_merge = !sh.is_empty()
            && operands
                .iter()
                .enumerate()
                .all(|(k, st)| *sts[k].last().unwrap() == st[d] * shape[d]);
        if can_merge {
            let last = sh.len() - 1;
            sh[last] *= shape[d];
            for (k, st) in operands.iter().enumerate() {
                *sts[k].last_mut().unwrap() = st[d];
            }
        } else {
            sh.push(shape[d]);
            for (k, st) in operands.iter().enumerate() {
                sts[k].push(st[d]);
            }
        }
    }
    if sh.is_empty() {
        sh.push(1);
        for st in sts.iter_mut() {
            st.push(0);
        }
    }
    for (k, st) in sts.into_iter().enumerate() {
        operands[k] = st;
    }
    sh
}

/// Visits every output element as `(out_index, a_offset, b_offset)` rows.
fn for_each_row(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let nd = shape.len();
    let inner = shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let rows: usize = shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for r in 0..rows {
        f(r * inner, oa, ob, inner, ia, ib);
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let out_shape = broadcast_shape(ash, bsh)?;
    let n: usize = out_shape.iter().product();
    if ash == bsh {
        return Ok((out_shape, a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()));
    }
    let mut ops = vec![view_strides(ash, &out_shape), view_strides(bsh, &out_shape)];
    let sh = collapse(&out_shape, &mut ops);
    let mut out = vec![T::zero(); n];
    for_each_row(&sh, &ops[0], &ops[1], |o, oa, ob, len, ia, ib| {
        let dst = &mut out[o..o + len];
        match (ia, ib) {
            (1, 0) => {
                let y = b[ob];
                for (d, &x) in dst.iter_mut().zip(&a[oa..oa + len]) {
                    *d = f(x, y);
                }
            }
            (0, 1) => {
                let x = a[oa];
                for (d, &y) in dst.iter_mut().zip(&b[ob..ob + len]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(a[oa + j * ia], b[ob + j * ib]);
                }
            }
        }
    });
    Ok((out_shape, out))
}

/// Sums `grad` (shaped `gshape`) down to `target` by reducing broadcast dims.
pub fn reduce_to_shape<T: Scalar>(grad: &[T], gshape: &[usize], target: &[usize]) -> Vec<T> {
    reduce_weighted(grad, gshape, None, target)
}

/// Like [`reduce_to_shape`] but multiplies each element by `w` (broadcast to `gshape`).
pub fn reduce_weighted<T: Scalar>(
    grad: &[T],
    gshape: &[usize],
    w: Option<(&[T], &[usize])>,
    target: &[usize],
) -> Vec<T> {
    let tn: usize = target.iter().product();
    let mut out = vec![T::zero(); tn];
    let zero_strides = vec![0; gshape.len()];
    let mut ops = vec![
        strides(gshape),
        view_strides(target, gshape),
        match w {
            Some((_, wsh)) => view_strides(wsh, gshape),
            None => zero_strides,
        },
    ];
    let sh = collapse(gshape, &mut ops);
    let nd = sh.len();
    let inner = sh[nd - 1];
    let rows: usize = sh[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut og, mut ot, mut ow) = (0usize, 0usize, 0usize);
    let (ig, it, iw) = (ops[0][nd - 1], ops[1][nd - 1], ops[2][nd - 1]);
    for _ in 0..rows {
        match w {
            None => {
                if it == 0 {
                    let mut acc = T::zero();
                    for j in 0..inner {
                        acc += grad[og + j * ig];
                    }
                    out[ot] += acc;
                } else {
                    for j in 0..inner {
                        out[ot + j * it] += grad[og + j * ig];
                    }
                }
            }
            Some((wd, _)) => {
                for j in 0..inner {
                    out[ot + j * it] += grad[og + j * ig] * wd[ow + j * iw];
                }
            }
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            og += ops[0][d];
            ot += ops[1][d];
            ow += ops[2][d];
            if idx[d] < sh[d] {
                break;
            }
            og -= ops[0][d] * sh[d];
            ot -= ops[1][d] * sh[d];
            ow -= ops[2][d] * sh[d];
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Elementwise activations

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = s::<T>(SQRT_2_OVER_PI) * (x + s::<T>(GELU_C) * x * x * x);
    s::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = s::<T>(SQRT_2_OVER_PI);
    let inner = c * (x + s::<T>(GELU_C) * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + s::<T>(3.0 * GELU_C) * x * x);
    s::<T>(0.5) * (T::one() + th) + s::<T>(0.5) * x * (T::one() - th * th) * dinner
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let sg = T::one() / (T::one() + (-x).exp());
    sg * (T::one() + x * (T::one() - sg))
}

// ---------------------------------------------------------------------------
// Dense linear layer: x[N,F] · w[F,G] (+ b[G])

pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, f: usize, g: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * g];
    if let Some(b) = b {
        for row in out.chunks_mut(g) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        n,
        f,
        g,
        T::one(),
        x,
        f as isize,
        1,
        w,
        g as isize,
        1,
        beta,
        &mut out,
        g as isize,
        1,
    );
    out
}

/// Returns (grad_x, grad_w, grad_b) as requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    f: usize,
    g: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); n * f];
        // gx = gout · wᵀ
        T::gemm(
            n,
            g,
            f,
            T::one(),
            gout,
            g as isize,
            1,
            w,
            1,
            g as isize,
            T::zero(),
            &mut gx,
            f as isize,
            1,
        );
        gx
    });
    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); f * g];
        // gw = xᵀ · gout
        T::gemm(
            f,
            n,
            g,
            T::one(),
            x,
            1,
            f as isize,
            gout,
            g as isize,
            1,
            T::zero(),
            &mut gw,
            g as isize,
            1,
        );
        gw
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); g];
        for row in gout.chunks(g) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        gb
    });
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// 3-D convolution via tiled im2col + gemm

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub circular: bool,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, circular: bool, in_dims: [usize; 3]) -> Result<Self> {
        if k % 2 == 0 {
            return Err(shape_err!("conv kernel size must be odd, got {}", k));
        }
        if !(1..=2).contains(&stride) {
            return Err(shape_err!("conv stride must be 1 or 2, got {}", stride));
        }
        let pad = (k - 1) / 2;
        let mut out_dims = [0; 3];
        for d in 0..3 {
            if circular {
                if in_dims[d] % stride != 0 {
                    return Err(shape_err!(
                        "circular conv needs extents divisible by stride {}, got {:?}",
                        stride,
                        in_dims
                    ));
                }
                out_dims[d] = in_dims[d] / stride;
            } else {
                if in_dims[d] + 2 * pad < k {
                    return Err(shape_err!("conv input {:?} too small for kernel {}", in_dims, k));
                }
                out_dims[d] = (in_dims[d] + 2 * pad - k) / stride + 1;
            }
        }
        Ok(ConvGeom {
            cin,
            cout,
            k,
            stride,
            pad,
            circular,
            in_dims,
            out_dims,
        })
    }

    fn in_vox(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn ksz(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Source index along one axis, or `None` when it falls in the zero padding.
    #[inline]
    fn src(&self, o: usize, kk: usize, axis: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        let n = self.in_dims[axis] as isize;
        if self.circular {
            Some(i.rem_euclid(n) as usize)
        } else if i < 0 || i >= n {
            None
        } else {
            Some(i as usize)
        }
    }

    /// Tiles of output (x, y) rows: each tile covers `rows` consecutive rows.
    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let [ox, oy, oz] = self.out_dims;
        let total = ox * oy;
        let rows = (CONV_TILE / oz.max(1)).max(1);
        (0..total).step_by(rows).map(move |r0| (r0, rows.min(total - r0)))
    }
}

const CONV_TILE: usize = 1024;

/// Maximal runs along the last axis where consecutive outputs read
/// consecutive inputs, as `(out_start, len, in_start)` for each kernel offset.
fn z_runs(g: &ConvGeom) -> Vec<Vec<(usize, usize, usize)>> {
    let oz = g.out_dims[2];
    (0..g.k)
        .map(|kz| {
            let mut runs: Vec<(usize, usize, usize)> = Vec::new();
            for o in 0..oz {
                let Some(i) = g.src(o, kz, 2) else { continue };
                match runs.last_mut() {
                    Some((s, len, src)) if *s + *len == o && *src + *len == i => *len += 1,
                    _ => runs.push((o, 1, i)),
                }
            }
            runs
        })
        .collect()
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], row0: usize, nrows: usize, col: &mut [T]) {
    let [_, oy, oz] = g.out_dims;
    let [_, iy, iz] = g.in_dims;
    let k = g.k;
    let width = nrows * oz;
    let runs = z_runs(g);
    let full = |r: &[(usize, usize, usize)]| r.len() == 1 && r[0].1 == oz;
    for ci in 0..g.cin {
        let xc = &x[ci * g.in_vox()..(ci + 1) * g.in_vox()];
        for kx in 0..k {
            for ky in 0..k {
                for (kz, zr) in runs.iter().enumerate() {
                    let r = ((ci * k + kx) * k + ky) * k + kz;
                    let dst = &mut col[r * width..(r + 1) * width];
                    for rr in 0..nrows {
                        let row = row0 + rr;
                        let (ox_, oy_) = (row / oy, row % oy);
                        let drow = &mut dst[rr * oz..(rr + 1) * oz];
                        let (Some(sx), Some(sy)) = (g.src(ox_, kx, 0), g.src(oy_, ky, 1)) else {
                            drow.fill(T::zero());
                            continue;
                        };
                        let base = (sx * iy + sy) * iz;
                        if !full(zr) {
                            drow.fill(T::zero());
                        }
                        for &(o, len, i) in zr {
                            drow[o..o + len].copy_from_slice(&xc[base + i..base + i + len]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], row0: usize, nrows: usize, gx: &mut [T]) {
    let [_, oy, oz] = g.out_dims;
    let [_, iy, iz] = g.in_dims;
    let k = g.k;
    let width = nrows * oz;
    let in_vox = g.in_vox();
    let runs = z_runs(g);
    for ci in 0..g.cin {
        let gxc = &mut gx[ci * in_vox..(ci + 1) * in_vox];
        for kx in 0..k {
            for ky in 0..k {
                for (kz, zr) in runs.iter().enumerate() {
                    let r = ((ci * k + kx) * k + ky) * k + kz;
                    let src = &col[r * width..(r + 1) * width];
                    for rr in 0..nrows {
                        let row = row0 + rr;
                        let (ox_, oy_) = (row / oy, row % oy);
                        let (Some(sx), Some(sy)) = (g.src(ox_, kx, 0), g.src(oy_, ky, 1)) else {
                            continue;
                        };
                        let base = (sx * iy + sy) * iz;
                        let srow = &src[rr * oz..(rr + 1) * oz];
                        for &(o, len, i) in zr {
                            for (d, &v) in gxc[base + i..base + i + len].iter_mut().zip(&srow[o..o + len]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// x: [B, cin, in_dims], w: [cout, cin, k, k, k], b: [cout] -> [B, cout, out_dims]
pub fn conv3d_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (iv, ov, ksz) = (g.in_vox(), g.out_vox(), g.ksz());
    let mut out = vec![T::zero(); batch * g.cout * ov];
    out.par_chunks_mut(g.cout * ov)
        .zip(x.par_chunks(g.cin * iv))
        .for_each(|(ob, xb)| {
            if let Some(b) = b {
                for (co, chunk) in ob.chunks_mut(ov).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            let mut col = Vec::new();
            for (row0, nrows) in g.tiles() {
                let width = nrows * g.out_dims[2];
                col.resize(ksz * width, T::zero());
                im2col(g, xb, row0, nrows, &mut col);
                let off = row0 * g.out_dims[2];
                T::gemm(
                    g.cout,
                    ksz,
                    width,
                    T::one(),
                    w,
                    ksz as isize,
                    1,
                    &col,
                    width as isize,
                    1,
                    beta,
                    &mut ob[off..],
                    ov as isize,
                    1,
                );
            }
        });
    out
}

/// Returns (grad_x, grad_w, grad_b).
#[allow(clippy::type_complexity)]
pub fn conv3d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    gout: &[T],
    x: &[T],
    w: &[T],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (iv, ov, ksz) = (g.in_vox(), g.out_vox(), g.ksz());
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let xb = &x[bi * g.cin * iv..(bi + 1) * g.cin * iv];
            let gb = &gout[bi * g.cout * ov..(bi + 1) * g.cout * ov];
            let mut gx = need_x.then(|| vec![T::zero(); g.cin * iv]);
            let mut gw = need_w.then(|| vec![T::zero(); g.cout * ksz]);
            let mut col = Vec::new();
            let mut gcol = Vec::new();
            for (row0, nrows) in g.tiles() {
                let width = nrows * g.out_dims[2];
                let off = row0 * g.out_dims[2];
                if let Some(gw) = gw.as_mut() {
                    col.resize(ksz * width, T::zero());
                    im2col(g, xb, row0, nrows, &mut col);
                    // gw += gout_tile · colᵀ
                    T::gemm(
                        g.cout,
                        width,
                        ksz,
                        T::one(),
                        &gb[off..],
                        ov as isize,
                        1,
                        &col,
                        1,
                        width as isize,
                        T::one(),
                        gw,
                        ksz as isize,
                        1,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gcol.resize(ksz * width, T::zero());
                    // gcol = wᵀ · gout_tile
                    T::gemm(
                        ksz,
                        g.cout,
                        width,
                        T::one(),
                        w,
                        1,
                        ksz as isize,
                        &gb[off..],
                        ov as isize,
                        1,
                        T::zero(),
                        &mut gcol,
                        width as isize,
                        1,
                    );
                    col2im_add(g, &gcol, row0, nrows, gx);
                }
            }
            (gx, gw)
        })
        .collect();
    let mut gx_all = need_x.then(|| Vec::with_capacity(batch * g.cin * iv));
    let mut gw_all = need_w.then(|| vec![T::zero(); g.cout * ksz]);
    for (gx, gw) in per_sample {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend_from_slice(&gx);
        }
        if let (Some(all), Some(gw)) = (gw_all.as_mut(), gw) {
            for (a, v) in all.iter_mut().zip(gw) {
                *a += v;
            }
        }
    }
    let gb_all = need_b.then(|| {
        let mut gbias = vec![T::zero(); g.cout];
        for bi in 0..batch {
            for (co, acc) in gbias.iter_mut().enumerate() {
                let base = (bi * g.cout + co) * ov;
                *acc += gout[base..base + ov].iter().copied().sum::<T>();
            }
        }
        gbias
    });
    (gx_all, gw_all, gb_all)
}

// ---------------------------------------------------------------------------
// Normalizations

/// Group norm statistics per (batch, group): returns (mean, rstd).
pub fn group_stats<T: Scalar>(x: &[T], batch: usize, groups: usize, group_len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); batch * groups];
    let mut rstd = vec![T::zero(); batch * groups];
    let n = s::<T>(group_len as f64);
    for (i, chunk) in x.chunks(group_len).enumerate().take(batch * groups) {
        let m = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
        mean[i] = m;
        rstd[i] = T::one() / (var + eps).sqrt();
    }
    (mean, rstd)
}

/// Layer norm over rows of length `d`: returns (normalized, rstd per row).
pub fn layer_norm_forward<T: Scalar>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = s::<T>(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(x.len() / d.max(1));
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m) * r;
        }
        rstds.push(r);
    }
    (out, rstds)
}

pub fn softmax_rows<T: Scalar>(x: &mut [T], d: usize) {
    for row in x.chunks_mut(d) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// gx = y ⊙ (gy − Σ gy·y) per row.
pub fn softmax_backward_rows<T: Scalar>(y: &[T], gy: &[T], d: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((yr, gr), xr) in y.chunks(d).zip(gy.chunks(d)).zip(gx.chunks_mut(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &a), &b) in xr.iter_mut().zip(yr).zip(gr) {
            *o = a * (b - dot);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention over [B, H, T, Dh]

pub struct AttnDims {
    pub bh: usize,
    pub heads: usize,
    pub t: usize,
    pub dh: usize,
}

/// Returns (output, probabilities).
pub fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], bias: Option<&[T]>, d: &AttnDims) -> (Vec<T>, Vec<T>) {
    let (t, dh) = (d.t, d.dh);
    let scale = T::one() / s::<T>(dh as f64).sqrt();
    let mut probs = vec![T::zero(); d.bh * t * t];
    let mut out = vec![T::zero(); d.bh * t * dh];
    probs
        .par_chunks_mut(t * t)
        .zip(out.par_chunks_mut(t * dh))
        .enumerate()
        .for_each(|(i, (p, o))| {
            let qi = &q[i * t * dh..(i + 1) * t * dh];
            let ki = &k[i * t * dh..(i + 1) * t * dh];
            let vi = &v[i * t * dh..(i + 1) * t * dh];
            if let Some(b) = bias {
                let h = i % d.heads;
                p.copy_from_slice(&b[h * t * t..(h + 1) * t * t]);
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                t,
                dh,
                t,
                scale,
                qi,
                dh as isize,
                1,
                ki,
                1,
                dh as isize,
                beta,
                p,
                t as isize,
                1,
            );
            softmax_rows(p, t);
            T::gemm(
                t,
                t,
                dh,
                T::one(),
                p,
                t as isize,
                1,
                vi,
                dh as isize,
                1,
                T::zero(),
                o,
                dh as isize,
                1,
            );
        });
    (out, probs)
}

/// Returns (gq, gk, gv, gbias).
#[allow(clippy::type_complexity)]
pub fn attention_backward<T: Scalar>(
    gout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: &AttnDims,
    need_bias: bool,
) -> (Vec<T>, Vec<T>, Vec<T>, Option<Vec<T>>) {
    let (t, dh) = (d.t, d.dh);
    let scale = T::one() / s::<T>(dh as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut gs_all = vec![T::zero(); probs.len()];
    gq.par_chunks_mut(t * dh)
        .zip(gk.par_chunks_mut(t * dh))
        .zip(gv.par_chunks_mut(t * dh))
        .zip(gs_all.par_chunks_mut(t * t))
        .enumerate()
        .for_each(|(i, (((gqi, gki), gvi), gs))| {
            let r = i * t * dh..(i + 1) * t * dh;
            let (qi, ki, vi, go) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &gout[r]);
            let p = &probs[i * t * t..(i + 1) * t * t];
            // gv = pᵀ · go
            T::gemm(
                t,
                t,
                dh,
                T::one(),
                p,
                1,
                t as isize,
                go,
                dh as isize,
                1,
                T::zero(),
                gvi,
                dh as isize,
                1,
            );
            // gp = go · vᵀ
            let mut gp = vec![T::zero(); t * t];
            T::gemm(
                t,
                dh,
                t,
                T::one(),
                go,
                dh as isize,
                1,
                vi,
                1,
                dh as isize,
                T::zero(),
                &mut gp,
                t as isize,
                1,
            );
            gs.copy_from_slice(&softmax_backward_rows(p, &gp, t));
            // gq = gs · k · scale ; gk = gsᵀ · q · scale
            T::gemm(
                t,
                t,
                dh,
                scale,
                gs,
                t as isize,
                1,
                ki,
                dh as isize,
                1,
                T::zero(),
                gqi,
                dh as isize,
                1,
            );
            T::gemm(
                t,
                t,
                dh,
                scale,
                gs,
                1,
                t as isize,
                qi,
                dh as isize,
                1,
                T::zero(),
                gki,
                dh as isize,
                1,
            );
        });
    let gbias = need_bias.then(|| {
        let mut gb = vec![T::zero(); d.heads * t * t];
        for (i, gs) in gs_all.chunks(t * t).enumerate() {
            let h = i % d.heads;
            for (a, &v) in gb[h * t * t..(h + 1) * t * t].iter_mut().zip(gs) {
                *a += v;
            }
        }
        gb
    });
    (gq, gk, gv, gbias)
}

//! Dense row-major tensors and the scalar types they hold.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type usable in tensors and graphs.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + rustfft::FftNum + 'static
{
    const DTYPE: DType;

    /// `c <- alpha * a · b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dt:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dt;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Bounds are checked by the callers; matrixmultiply works on raw pointers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Shorthand for converting an `f64` literal into `T`.
#[inline]
pub fn s<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// A contiguous C-order tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.data.len().min(8);
        write!(f, "Tensor{:?} {:?}", self.shape, &self.data[..n])?;
        if self.data.len() > n {
            write!(f, "...")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            s(v)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| s(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "elementwise shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / s(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Axis permutation (`out.shape[i] = self.shape[perm[i]]`).
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let (shape, data) = permute_data(&self.data, &self.shape, perm)?;
        Ok(Tensor { shape, data })
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(shape_err!(
                "narrow axis {} range {}..{} out of bounds for {:?}",
                axis,
                start,
                start + len,
                self.shape
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let (shape, data) = concat_data(
            &parts
                .iter()
                .map(|t| (t.shape.as_slice(), t.data.as_slice()))
                .collect::<Vec<_>>(),
            axis,
        )?;
        Ok(Tensor { shape, data })
    }

    /// Circular shift along the spatial axes of a `[.., X, Y, Z]` tensor.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(shape_err!("roll axis {} for {:?}", axis, self.shape));
        }
        let n = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            for i in 0..n {
                let j = (i as isize + shift).rem_euclid(n as isize) as usize;
                let src = (o * n + i) * inner;
                let dst = (o * n + j) * inner;
                data[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Copies `src` into `self` at `offset` (same rank).
    pub fn write_block(&mut self, src: &Tensor<T>, offset: &[usize]) -> Result<()> {
        if src.ndim() != self.ndim() || offset.len() != self.ndim() {
            return Err(shape_err!("write_block rank mismatch"));
        }
        for d in 0..self.ndim() {
            if offset[d] + src.shape[d] > self.shape[d] {
                return Err(shape_err!(
                    "block {:?} at {:?} exceeds {:?}",
                    src.shape,
                    offset,
                    self.shape
                ));
            }
        }
        let nd = self.ndim();
        let inner = src.shape[nd - 1];
        let rows = src.numel() / inner.max(1);
        let dst_strides = strides(&self.shape);
        let mut idx = vec![0usize; nd.saturating_sub(1)];
        for r in 0..rows {
            let mut dst = offset[nd - 1];
            for d in 0..nd - 1 {
                dst += (offset[d] + idx[d]) * dst_strides[d];
            }
            self.data[dst..dst + inner].copy_from_slice(&src.data[r * inner..(r + 1) * inner]);
            for d in (0..nd - 1).rev() {
                idx[d] += 1;
                if idx[d] < src.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(())
    }

    /// Extracts a block of `size` starting at `offset` (same rank).
    pub fn read_block(&self, offset: &[usize], size: &[usize]) -> Result<Self> {
        let mut t = self.clone();
        for d in 0..self.ndim() {
            if size[d] != self.shape[d] {
                t = t.narrow(d, offset[d], size[d])?;
            }
        }
        Ok(t)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

pub(crate) fn permute_data<T: Copy + Default>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err!("invalid permutation {:?} for {:?}", perm, shape));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = vec![T::default(); n];
    if n == 0 {
        return Ok((out_shape, out));
    }
    let inner_len = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    while o < n {
        let mut base = 0;
        for d in 0..nd - 1 {
            base += idx[d] * src_strides[d];
        }
        for j in 0..inner_len {
            out[o + j] = data[base + j * inner_stride];
        }
        o += inner_len;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, out))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn concat_data<T: Copy>(parts: &[(&[usize], &[T])], axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let Some(&(first, _)) = parts.first() else {
        return Err(shape_err!("concat of zero tensors"));
    };
    if axis >= first.len() {
        return Err(shape_err!("concat axis {} for rank {}", axis, first.len()));
    }
    let mut total = 0;
    for (sh, _) in parts {
        if sh.len() != first.len() || sh.iter().zip(first).enumerate().any(|(d, (a, b))| d != axis && a != b) {
            return Err(shape_err!("concat shape mismatch {:?} vs {:?}", sh, first));
        }
        total += sh[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (sh, d) in parts {
            let chunk = sh[axis] * inner;
            data.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_then_inverse_is_identity() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0);
        let back = p.permute(&inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn narrow_concat_round_trip() {
        let t = Tensor::<f32>::from_fn(&[2, 5, 3], |i| i as f32);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn blocks_round_trip() {
        let t = Tensor::<f64>::from_fn(&[1, 2, 4, 4, 4], |i| i as f64);
        let blk = t.read_block(&[0, 0, 2, 0, 2], &[1, 2, 2, 4, 2]).unwrap();
        let mut z = Tensor::zeros(&[1, 2, 4, 4, 4]);
        z.write_block(&blk, &[0, 0, 2, 0, 2]).unwrap();
        assert_eq!(z.data()[(2 * 4) * 4 + 2], t.data()[(2 * 4) * 4 + 2]);
        assert_eq!(z.read_block(&[0, 0, 2, 0, 2], &[1, 2, 2, 4, 2]).unwrap(), blk);
    }

    #[test]
    fn bad_shape_rejected() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}

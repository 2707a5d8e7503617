//! Periodic grid in Fourier space: wavevectors, derivatives and the
//! two-thirds truncation used on nonlinear products.

use num_complex::Complex;

use crate::error::{shape_err, Result};
use crate::numerics::fft::signed_mode;
use crate::numerics::{Fft3, SpectralField};

pub type C64 = Complex<f64>;

pub struct Grid {
    pub dims: [usize; 3],
    pub lengths: [f64; 3],
    fft: Fft3<f64>,
    /// Angular wavevector of each stored half-spectrum bin.
    pub k: Vec<[f64; 3]>,
    pub k2: Vec<f64>,
    /// Bins kept by the two-thirds rule.
    pub keep: Vec<bool>,
    /// Bins on an even-length Nyquist plane, per axis.
    nyquist: Vec<[bool; 3]>,
}

impl Grid {
    pub fn new(dims: [usize; 3], lengths: [f64; 3]) -> Result<Self> {
        if lengths.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(shape_err!("domain lengths must be positive, got {:?}", lengths));
        }
        let fft = Fft3::new(dims)?;
        let hz = dims[2] / 2 + 1;
        let n = dims[0] * dims[1] * hz;
        let (mut k, mut k2, mut keep, mut nyquist) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for l in 0..hz {
                    let m = [signed_mode(i, dims[0]), signed_mode(j, dims[1]), l as i64];
                    let kv: [f64; 3] = std::array::from_fn(|a| 2.0 * std::f64::consts::PI * m[a] as f64 / lengths[a]);
                    k.push(kv);
                    k2.push(kv.iter().map(|v| v * v).sum());
                    keep.push((0..3).all(|a| 3 * m[a].unsigned_abs() < dims[a] as u64));
                    nyquist.push(std::array::from_fn(|a| dims[a] % 2 == 0 && m[a] == dims[a] as i64 / 2));
                }
            }
        }
        Ok(Grid {
            dims,
            lengths,
            fft,
            k,
            k2,
            keep,
            nyquist,
        })
    }

    /// Grid of `n³` points on a cube of side `length`.
    pub fn cube(n: usize, length: f64) -> Result<Self> {
        Grid::new([n; 3], [length; 3])
    }

    pub fn spectral_len(&self) -> usize {
        self.k.len()
    }

    pub fn physical_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Integer wavenumbers of a stored bin.
    pub fn mode(&self, idx: usize) -> [i64; 3] {
        let hz = self.dims[2] / 2 + 1;
        let (i, j, l) = (idx / (self.dims[1] * hz), (idx / hz) % self.dims[1], idx % hz);
        [signed_mode(i, self.dims[0]), signed_mode(j, self.dims[1]), l as i64]
    }

    pub fn forward(&self, u: &[f64]) -> Result<Vec<C64>> {
        Ok(self.fft.rfft3(u, self.lengths)?.coeffs)
    }

    pub fn inverse(&self, h: &[C64]) -> Result<Vec<f64>> {
        if h.len() != self.spectral_len() {
            return Err(shape_err!(
                "spectrum of {} bins, grid has {}",
                h.len(),
                self.spectral_len()
            ));
        }
        self.fft.irfft3(&SpectralField {
            dims: self.dims,
            lengths: self.lengths,
            coeffs: h.to_vec(),
        })
    }

    /// Spectral derivative along `axis`; the Nyquist plane of that axis is
    /// set to zero since its derivative is not real.
    pub fn deriv(&self, h: &[C64], axis: usize) -> Vec<C64> {
        h.iter()
            .zip(&self.k)
            .zip(&self.nyquist)
            .map(|((c, k), ny)| {
                if ny[axis] {
                    C64::default()
                } else {
                    c * C64::new(0.0, k[axis])
                }
            })
            .collect()
    }

    pub fn dealias(&self, h: &mut [C64]) {
        for (c, &keep) in h.iter_mut().zip(&self.keep) {
            if !keep {
                *c = C64::default();
            }
        }
    }

    /// Physical coordinates of voxel `(i, j, l)`.
    pub fn coord(&self, i: usize, j: usize, l: usize) -> [f64; 3] {
        let idx = [i, j, l];
        std::array::from_fn(|a| idx[a] as f64 * self.lengths[a] / self.dims[a] as f64)
    }
}

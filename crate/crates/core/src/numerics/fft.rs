//! Real-input 3-D FFT on periodic grids, stored as the half spectrum along the
//! last axis.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use super::tensor::{s, Scalar};
use crate::error::{shape_err, Result};

/// Half-spectrum coefficients of a real field on `[nx, ny, nz]`, laid out as
/// `[nx, ny, nz/2 + 1]` in C order. Unnormalised forward transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField<T> {
    pub dims: [usize; 3],
    pub lengths: [f64; 3],
    pub coeffs: Vec<Complex<T>>,
}

impl<T: Scalar> SpectralField<T> {
    pub fn half_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2] / 2 + 1]
    }

    /// Signed integer wavenumbers of a stored bin.
    pub fn mode(&self, i: usize, j: usize, l: usize) -> [i64; 3] {
        [signed_mode(i, self.dims[0]), signed_mode(j, self.dims[1]), l as i64]
    }

    /// Angular wavenumber `2π n / L` of a stored bin.
    pub fn wavevector(&self, i: usize, j: usize, l: usize) -> [f64; 3] {
        let m = self.mode(i, j, l);
        std::array::from_fn(|a| 2.0 * std::f64::consts::PI * m[a] as f64 / self.lengths[a])
    }

    /// How many full-spectrum coefficients the stored bin at last index `l`
    /// represents (the Hermitian partner is implicit except on the edge planes).
    pub fn multiplicity(&self, l: usize) -> usize {
        let nz = self.dims[2];
        if l == 0 || (nz % 2 == 0 && l == nz / 2) {
            1
        } else {
            2
        }
    }

    /// Sum over the full spectrum of `|c|²`.
    pub fn energy(&self) -> T {
        let hz = self.dims[2] / 2 + 1;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(idx, c)| c.norm_sqr() * s::<T>(self.multiplicity(idx % hz) as f64))
            .sum()
    }
}

pub fn signed_mode(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Cached plans for one grid size.
pub struct Fft3<T: Scalar> {
    dims: [usize; 3],
    fwd: [Arc<dyn Fft<T>>; 3],
    inv: [Arc<dyn Fft<T>>; 3],
}

impl<T: Scalar> Fft3<T> {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(shape_err!("FFT extents must be at least 2, got {:?}", dims));
        }
        let mut planner = FftPlanner::new();
        let fwd = dims.map(|d| planner.plan_fft(d, FftDirection::Forward));
        let inv = dims.map(|d| planner.plan_fft(d, FftDirection::Inverse));
        Ok(Fft3 { dims, fwd, inv })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn transform(&self, buf: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3]) {
        let [nx, ny, nz] = self.dims;
        plans[2].process(buf);
        let mut line = vec![Complex::default(); nx.max(ny)];
        for i in 0..nx {
            for l in 0..nz {
                for j in 0..ny {
                    line[j] = buf[(i * ny + j) * nz + l];
                }
                plans[1].process(&mut line[..ny]);
                for j in 0..ny {
                    buf[(i * ny + j) * nz + l] = line[j];
                }
            }
        }
        for j in 0..ny {
            for l in 0..nz {
                for i in 0..nx {
                    line[i] = buf[(i * ny + j) * nz + l];
                }
                plans[0].process(&mut line[..nx]);
                for i in 0..nx {
                    buf[(i * ny + j) * nz + l] = line[i];
                }
            }
        }
    }

    /// Forward transform of a real C-order field.
    pub fn rfft3(&self, field: &[T], lengths: [f64; 3]) -> Result<SpectralField<T>> {
        let [nx, ny, nz] = self.dims;
        if field.len() != nx * ny * nz {
            return Err(shape_err!("rfft3 expects {} values, got {}", nx * ny * nz, field.len()));
        }
        let mut buf: Vec<Complex<T>> = field.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut buf, &self.fwd);
        let hz = nz / 2 + 1;
        let mut coeffs = Vec::with_capacity(nx * ny * hz);
        for row in buf.chunks(nz) {
            coeffs.extend_from_slice(&row[..hz]);
        }
        Ok(SpectralField {
            dims: self.dims,
            lengths,
            coeffs,
        })
    }

    /// Inverse transform, normalised so that `irfft3(rfft3(u)) = u`.
    pub fn irfft3(&self, spec: &SpectralField<T>) -> Result<Vec<T>> {
        let [nx, ny, nz] = self.dims;
        if spec.dims != self.dims {
            return Err(shape_err!("spectrum dims {:?} vs plan {:?}", spec.dims, self.dims));
        }
        let hz = nz / 2 + 1;
        let mut buf = vec![Complex::default(); nx * ny * nz];
        for i in 0..nx {
            for j in 0..ny {
                let row = (i * ny + j) * nz;
                buf[row..row + hz].copy_from_slice(&spec.coeffs[(i * ny + j) * hz..(i * ny + j + 1) * hz]);
                let (ci, cj) = ((nx - i) % nx, (ny - j) % ny);
                for l in hz..nz {
                    buf[row + l] = spec.coeffs[(ci * ny + cj) * hz + (nz - l)].conj();
                }
            }
        }
        self.transform(&mut buf, &self.inv);
        let norm = T::one() / s::<T>((nx * ny * nz) as f64);
        Ok(buf.into_iter().map(|c| c.re * norm).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dft_oracle(u: &[f64], n: [usize; 3]) -> Vec<Complex<f64>> {
        let tau = 2.0 * std::f64::consts::PI;
        let mut out = vec![Complex::default(); n[0] * n[1] * n[2]];
        for a in 0..n[0] {
            for b in 0..n[1] {
                for c in 0..n[2] {
                    let mut acc = Complex::new(0.0, 0.0);
                    for x in 0..n[0] {
                        for y in 0..n[1] {
                            for z in 0..n[2] {
                                let ph = -tau
                                    * ((a * x) as f64 / n[0] as f64
                                        + (b * y) as f64 / n[1] as f64
                                        + (c * z) as f64 / n[2] as f64);
                                acc += u[(x * n[1] + y) * n[2] + z] * Complex::from_polar(1.0, ph);
                            }
                        }
                    }
                    out[(a * n[1] + b) * n[2] + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_dft_on_small_grid() {
        let n = [4, 3, 4];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..48).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let f = Fft3::<f64>::new(n).unwrap();
        let sp = f.rfft3(&u, [1.0; 3]).unwrap();
        let full = dft_oracle(&u, n);
        let hz = n[2] / 2 + 1;
        for i in 0..n[0] {
            for j in 0..n[1] {
                for l in 0..hz {
                    let d = sp.coeffs[(i * n[1] + j) * hz + l] - full[(i * n[1] + j) * n[2] + l];
                    assert!(d.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let n = [8, 8, 8];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..512).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let f = Fft3::<f64>::new(n).unwrap();
        let sp = f.rfft3(&u, [1.0; 3]).unwrap();
        let back = f.irfft3(&sp).unwrap();
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let lhs: f64 = u.iter().map(|v| v * v).sum::<f64>() / 512.0;
        let rhs = sp.energy() / (512.0 * 512.0);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.max(1.0));
    }

    #[test]
    fn parseval_f32() {
        let n = [8, 6, 10];
        let nn = 480;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f32> = (0..nn).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let f = Fft3::<f32>::new(n).unwrap();
        let sp = f.rfft3(&u, [1.0; 3]).unwrap();
        let lhs: f32 = u.iter().map(|v| v * v).sum::<f32>() / nn as f32;
        let rhs = sp.energy() / (nn * nn) as f32;
        assert!((lhs - rhs).abs() < 1e-5);
        let back = f.irfft3(&sp).unwrap();
        let err: f32 = u.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
        let nrm: f32 = u.iter().map(|a| a * a).sum::<f32>().sqrt();
        assert!(err / nrm < 1e-5);
    }

    #[test]
    fn constant_and_single_mode() {
        let n = [8, 8, 8];
        let f = Fft3::<f64>::new(n).unwrap();
        let sp = f.rfft3(&[2.5; 512], [1.0; 3]).unwrap();
        assert!((sp.coeffs[0].re - 2.5 * 512.0).abs() < 1e-9);
        assert!(sp.coeffs[1..].iter().all(|c| c.norm() < 1e-9));

        let l = 3.0;
        let u: Vec<f64> = (0..512)
            .map(|idx| {
                let x = (idx / 64) as f64 * l / 8.0;
                (2.0 * std::f64::consts::PI * x / l).sin()
            })
            .collect();
        let sp = f.rfft3(&u, [l, 1.0, 1.0]).unwrap();
        let nonzero: Vec<usize> = (0..sp.coeffs.len()).filter(|&i| sp.coeffs[i].norm() > 1e-9).collect();
        assert_eq!(nonzero.len(), 2);
        let hz = 5;
        let (a, b) = (sp.coeffs[hz * 8], sp.coeffs[7 * 8 * hz]);
        assert!((a - b.conj()).norm() < 1e-9);
        assert!((sp.wavevector(1, 0, 0)[0] - 2.0 * std::f64::consts::PI / l).abs() < 1e-12);
    }

    #[test]
    fn rejects_tiny_extent() {
        assert!(Fft3::<f64>::new([1, 4, 4]).is_err());
    }
}

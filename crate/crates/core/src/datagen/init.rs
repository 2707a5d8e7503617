//! Randomised initial states. Spectral shaping uses integer wavenumbers, so
//! the statistics do not depend on the physical domain length.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::spectral::Grid;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Initializer {
    /// Random Fourier series with every mode of norm at most `cutoff`.
    Fourier { cutoff: usize },
    /// Power spectrum `|m|^-exponent`.
    Grf { exponent: f64 },
    /// White noise diffused so the spectrum decays like `exp(-intensity·(2π|m|)²)`.
    Diffused { intensity: f64 },
}

impl Initializer {
    /// One of the three kinds with its parameter drawn from the usual range.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.random_range(0..3) {
            0 => Initializer::Fourier {
                cutoff: rng.random_range(2..=10),
            },
            1 => Initializer::Grf {
                exponent: rng.random_range(2.3..3.6),
            },
            _ => Initializer::Diffused {
                intensity: rng.random_range(5e-5..0.01),
            },
        }
    }

    /// A field on `dims`, scaled to maximum absolute value one.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R, dims: [usize; 3]) -> Result<Vec<f64>> {
        let grid = Grid::new(dims, [1.0; 3])?;
        let noise: Vec<f64> = (0..grid.physical_len()).map(|_| StandardNormal.sample(rng)).collect();
        let mut h = grid.forward(&noise)?;
        for (idx, c) in h.iter_mut().enumerate() {
            let m = grid.mode(idx);
            let norm = (m.iter().map(|&v| (v * v) as f64).sum::<f64>()).sqrt();
            let gain = match *self {
                Initializer::Fourier { cutoff } => {
                    if norm > 0.0 && norm <= cutoff as f64 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Initializer::Grf { exponent } => {
                    if norm > 0.0 {
                        norm.powf(-exponent / 2.0)
                    } else {
                        0.0
                    }
                }
                Initializer::Diffused { intensity } => (-intensity * (2.0 * std::f64::consts::PI * norm).powi(2)).exp(),
            };
            *c *= gain;
        }
        let mut u = grid.inverse(&h)?;
        normalize_max_abs(&mut u);
        Ok(u)
    }
}

pub fn normalize_max_abs(u: &mut [f64]) {
    let m = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        u.iter_mut().for_each(|v| *v /= m);
    }
}

pub fn init_fourier<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3]) -> Result<Vec<f64>> {
    let cutoff = rng.random_range(2..=10);
    Initializer::Fourier { cutoff }.generate(rng, dims)
}

pub fn init_grf<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3]) -> Result<Vec<f64>> {
    let exponent = rng.random_range(2.3..3.6);
    Initializer::Grf { exponent }.generate(rng, dims)
}

pub fn init_diffused<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3]) -> Result<Vec<f64>> {
    let intensity = rng.random_range(5e-5..0.01);
    Initializer::Diffused { intensity }.generate(rng, dims)
}

/// Gaussian bumps given as fractions of the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Blobs {
    pub centers: Vec<[f64; 3]>,
    pub widths: Vec<f64>,
}

pub const BLOB_COUNT: usize = 4;

impl Blobs {
    /// Centres uniform in the central `fraction` of each axis.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, fraction: f64) -> Self {
        let lo = 0.5 - fraction / 2.0;
        let mut centers = Vec::with_capacity(BLOB_COUNT);
        let mut widths = Vec::with_capacity(BLOB_COUNT);
        for _ in 0..BLOB_COUNT {
            centers.push(std::array::from_fn(|_| lo + fraction * rng.random::<f64>()));
            widths.push(rng.random_range(0.03..0.1));
        }
        Blobs { centers, widths }
    }

    /// Sum of the bumps clamped to `[0, 1]`, with periodic distances.
    pub fn render(&self, dims: [usize; 3]) -> Vec<f64> {
        let mut out = vec![0.0; dims.iter().product()];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for l in 0..dims[2] {
                    let x = [i, j, l];
                    let p: [f64; 3] = std::array::from_fn(|a| x[a] as f64 / dims[a] as f64);
                    let v: f64 = self
                        .centers
                        .iter()
                        .zip(&self.widths)
                        .map(|(c, w)| {
                            let d2: f64 = (0..3)
                                .map(|a| {
                                    let d = (p[a] - c[a]).abs();
                                    d.min(1.0 - d).powi(2)
                                })
                                .sum();
                            (-d2 / (2.0 * w * w)).exp()
                        })
                        .sum();
                    out[(i * dims[1] + j) * dims[2] + l] = v.clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Two-species start: `(1 − b, b)` with `b` a set of random bumps.
pub fn init_gs_blobs<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3], fraction: f64) -> (Vec<f64>, Vec<f64>) {
    let b = Blobs::sample(rng, fraction).render(dims);
    let a = b.iter().map(|v| 1.0 - v).collect();
    (a, b)
}

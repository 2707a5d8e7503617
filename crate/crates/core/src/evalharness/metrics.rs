//! Error metrics, vorticity, enstrophy spectra and velocity-profile moments.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Fft3, Tensor};

/// `‖pred − ref‖ / ‖ref‖` over every entry.
pub fn nrmse(pred: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(shape_err!(
            "nrmse of {:?} against {:?}",
            pred.shape(),
            reference.shape()
        ));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, r) in pred.data().iter().zip(reference.data()) {
        num += (p - r) * (p - r);
        den += r * r;
    }
    if den == 0.0 {
        return Err(Error::Config("nrmse reference has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// [`nrmse`] per item of the leading axis, averaged.
pub fn nrmse_batched(pred: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != reference.shape() || pred.ndim() < 1 || pred.shape()[0] == 0 {
        return Err(shape_err!(
            "nrmse of {:?} against {:?}",
            pred.shape(),
            reference.shape()
        ));
    }
    let b = pred.shape()[0];
    let mut total = 0.0;
    for i in 0..b {
        total += nrmse(&pred.narrow(0, i, 1)?, &reference.narrow(0, i, 1)?)?;
    }
    Ok(total / b as f64)
}

/// Curl of a `[3, X, Y, Z]` velocity by second-order central differences.
/// With `periodic` the stencil wraps; otherwise the boundary planes use
/// second-order one-sided differences.
pub fn vorticity_fd(u: &Tensor<f64>, spacing: [f64; 3], periodic: bool) -> Result<Tensor<f64>> {
    let sh = u.shape();
    if sh.len() != 4 || sh[0] != 3 {
        return Err(shape_err!("vorticity needs a [3, X, Y, Z] velocity, got {:?}", sh));
    }
    let d = [sh[1], sh[2], sh[3]];
    if d.iter().any(|&n| n < 3) {
        return Err(shape_err!("vorticity needs at least 3 points per axis, got {:?}", d));
    }
    let idx = |c: usize, p: [usize; 3]| ((c * d[0] + p[0]) * d[1] + p[1]) * d[2] + p[2];
    let v = u.data();
    // ∂_axis of component c at p
    let deriv = |c: usize, axis: usize, p: [usize; 3]| -> f64 {
        let n = d[axis];
        let h = spacing[axis];
        let at = |i: usize| {
            let mut q = p;
            q[axis] = i;
            v[idx(c, q)]
        };
        let i = p[axis];
        if periodic {
            (at((i + 1) % n) - at((i + n - 1) % n)) / (2.0 * h)
        } else if i == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if i == n - 1 {
            (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
        } else {
            (at(i + 1) - at(i - 1)) / (2.0 * h)
        }
    };
    let mut out = vec![0.0; v.len()];
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                let p = [x, y, z];
                out[idx(0, p)] = deriv(2, 1, p) - deriv(1, 2, p);
                out[idx(1, p)] = deriv(0, 2, p) - deriv(2, 0, p);
                out[idx(2, p)] = deriv(1, 0, p) - deriv(0, 1, p);
            }
        }
    }
    Tensor::new(sh, out)
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    #[default]
    None,
}

/// Enstrophy per integer wavenumber shell; shell `k` holds modes with
/// `|m| ∈ [k − ½, k + ½)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnstrophyGraph {
    pub shells: Vec<f64>,
}

impl EnstrophyGraph {
    pub fn total(&self) -> f64 {
        self.shells.iter().sum()
    }

    /// Shell-wise mean of several graphs with the same bins.
    pub fn mean(graphs: &[EnstrophyGraph]) -> Result<EnstrophyGraph> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Config("no graphs to average".into()))?;
        let mut shells = vec![0.0; first.shells.len()];
        for g in graphs {
            if g.shells.len() != shells.len() {
                return Err(shape_err!("graphs with {} and {} shells", g.shells.len(), shells.len()));
            }
            for (s, v) in shells.iter_mut().zip(&g.shells) {
                *s += v / graphs.len() as f64;
            }
        }
        Ok(EnstrophyGraph { shells })
    }
}

/// Shell of a mode given by its integer wavenumbers.
pub fn shell_of(m: [i64; 3]) -> usize {
    ((m.iter().map(|&v| (v * v) as f64).sum::<f64>()).sqrt() + 0.5).floor() as usize
}

/// `E(k) = ½ Σ_{shell k} |ω̂|²` with `ω̂` the transform divided by the voxel
/// count, so a unit-amplitude sine contributes ¼ of its squared amplitude.
pub fn enstrophy_graph(vorticity: &Tensor<f64>, window: Window) -> Result<EnstrophyGraph> {
    let sh = vorticity.shape();
    if sh.len() != 4 || sh[1] != sh[2] || sh[2] != sh[3] {
        return Err(shape_err!("enstrophy graph needs [C, n, n, n], got {:?}", sh));
    }
    let n = sh[1];
    let fft = Fft3::<f64>::new([n; 3])?;
    let w = hann(n);
    let vox = n * n * n;
    let nshells = shell_of([(n / 2) as i64; 3]) + 1;
    let mut shells = vec![0.0; nshells];
    for c in 0..sh[0] {
        let mut field = vorticity.data()[c * vox..(c + 1) * vox].to_vec();
        if window == Window::Hann {
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        field[(x * n + y) * n + z] *= w[x] * w[y] * w[z];
                    }
                }
            }
        }
        let spec = fft.rfft3(&field, [1.0; 3])?;
        let hz = n / 2 + 1;
        let norm = 1.0 / (vox as f64 * vox as f64);
        for (idx, coef) in spec.coeffs.iter().enumerate() {
            let (i, j, l) = (idx / (n * hz), (idx / hz) % n, idx % hz);
            let k = shell_of(spec.mode(i, j, l));
            shells[k] += 0.5 * coef.norm_sqr() * norm * spec.multiplicity(l) as f64;
        }
    }
    Ok(EnstrophyGraph { shells })
}

/// Euclidean distance between two graphs with identical bins.
pub fn enstrophy_l2(a: &EnstrophyGraph, b: &EnstrophyGraph) -> Result<f64> {
    if a.shells.len() != b.shells.len() {
        return Err(shape_err!(
            "graphs with {} and {} shells",
            a.shells.len(),
            b.shells.len()
        ));
    }
    Ok(a.shells
        .iter()
        .zip(&b.shells)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Mean, variance and skewness of one velocity component as a function of
/// the coordinate along the wall-normal axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub skewness: Vec<f64>,
}

impl ProfileMoments {
    /// Profile of moment `m` (1 mean, 2 variance, 3 skewness).
    pub fn moment(&self, m: usize) -> Result<&[f64]> {
        match m {
            1 => Ok(&self.mean),
            2 => Ok(&self.variance),
            3 => Ok(&self.skewness),
            _ => Err(Error::Config(format!("moment {m} is not 1, 2 or 3"))),
        }
    }
}

/// Below this standard deviation the skewness is reported as zero.
pub const SKEW_SIGMA_MIN: f64 = 1e-12;

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64) {
    let (mut n, mut s) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        s += v;
    }
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mean = s / n as f64;
    let (mut m2, mut m3) = (0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    let var = m2 / n as f64;
    let sd = var.sqrt();
    let skew = if sd < SKEW_SIGMA_MIN {
        0.0
    } else {
        m3 / n as f64 / (sd * sd * sd)
    };
    (mean, var, skew)
}

fn check_samples(samples: &[Tensor<f64>], channel: usize) -> Result<&[usize]> {
    let first = samples.first().ok_or_else(|| Error::Config("no samples".into()))?;
    let sh = first.shape();
    if sh.len() != 4 || channel >= sh[0] {
        return Err(shape_err!(
            "samples must be [C, X, Y, Z] with channel {channel}, got {:?}",
            sh
        ));
    }
    if samples.iter().any(|s| s.shape() != sh) {
        return Err(shape_err!("samples differ in shape"));
    }
    Ok(sh)
}

/// Moments of channel `flow_channel` at each coordinate of spatial axis
/// `wall_axis` (0, 1 or 2), pooling the other two axes and all samples.
pub fn profile_moments(samples: &[Tensor<f64>], flow_channel: usize, wall_axis: usize) -> Result<ProfileMoments> {
    let sh = check_samples(samples, flow_channel)?;
    if wall_axis > 2 {
        return Err(Error::Config(format!("wall axis {wall_axis} is not a spatial axis")));
    }
    let d = [sh[1], sh[2], sh[3]];
    let vox = d[0] * d[1] * d[2];
    let mut out = ProfileMoments {
        mean: vec![],
        variance: vec![],
        skewness: vec![],
    };
    for w in 0..d[wall_axis] {
        let vals = samples.iter().flat_map(move |s| {
            let data = &s.data()[flow_channel * vox..(flow_channel + 1) * vox];
            (0..vox).filter_map(move |i| {
                let p = [i / (d[1] * d[2]), (i / d[2]) % d[1], i % d[2]];
                (p[wall_axis] == w).then(|| data[i])
            })
        });
        let (m, v, k) = moments(vals);
        out.mean.push(m);
        out.variance.push(v);
        out.skewness.push(k);
    }
    Ok(out)
}

/// Euclidean distance between the moment-`m` profiles.
pub fn profile_l2(a: &ProfileMoments, b: &ProfileMoments, m: usize) -> Result<f64> {
    let (x, y) = (a.moment(m)?, b.moment(m)?);
    if x.len() != y.len() {
        return Err(shape_err!("profiles of length {} and {}", x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
}

/// Pooled `(mean, variance, skewness)` of one channel over all voxels and samples.
pub fn global_moments(samples: &[Tensor<f64>], channel: usize) -> Result<(f64, f64, f64)> {
    let sh = check_samples(samples, channel)?;
    let vox: usize = sh[1..].iter().product();
    Ok(moments(samples.iter().flat_map(move |s| {
        s.data()[channel * vox..(channel + 1) * vox].iter().copied()
    })))
}

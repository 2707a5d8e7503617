//! Exponential time differencing Runge-Kutta steppers for semilinear systems
//! `u_t = L u + N(u)` with a diagonal linear part in Fourier space.

use serde::{Deserialize, Serialize};

use super::spectral::C64;
use crate::error::{shape_err, Error, Result};

/// Points on the circle used to evaluate the φ functions near zero.
pub const CONTOUR_POINTS: usize = 16;
/// Below this `|z|` the φ functions are averaged over a unit circle around `z`.
pub const CONTOUR_RADIUS_SWITCH: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtdOrder {
    #[default]
    Etdrk2,
    Etdrk4,
}

/// Mean of `f` over `CONTOUR_POINTS` points on the unit circle centred at
/// `z`; equals `f(z)` for entire `f` up to terms of order 16 in the radius.
fn contour_mean(z: C64, f: impl Fn(C64) -> C64) -> C64 {
    let m = CONTOUR_POINTS as f64;
    (0..CONTOUR_POINTS)
        .map(|j| {
            let th = std::f64::consts::PI * (2.0 * j as f64 + 1.0) / m;
            f(z + C64::from_polar(1.0, th))
        })
        .sum::<C64>()
        / m
}

fn eval(z: C64, f: impl Fn(C64) -> C64) -> C64 {
    if z.norm() < CONTOUR_RADIUS_SWITCH {
        contour_mean(z, f)
    } else {
        f(z)
    }
}

/// `(e^z − 1) / z`.
pub fn phi1(z: C64) -> C64 {
    eval(z, |z| (z.exp() - 1.0) / z)
}

/// `(e^z − 1 − z) / z²`.
pub fn phi2(z: C64) -> C64 {
    eval(z, |z| (z.exp() - 1.0 - z) / (z * z))
}

/// The three fourth-order weights of Cox and Matthews, without the `dt` factor.
fn etd4_weights(z: C64) -> [C64; 3] {
    let z3 = |z: C64| z * z * z;
    [
        eval(z, |z| (-4.0 - z + z.exp() * (4.0 - 3.0 * z + z * z)) / z3(z)),
        eval(z, |z| (2.0 + z + z.exp() * (z - 2.0)) / z3(z)),
        eval(z, |z| (-4.0 - 3.0 * z - z * z + z.exp() * (4.0 - z)) / z3(z)),
    ]
}

struct Coeffs {
    e: Vec<C64>,
    e2: Vec<C64>,
    w: [Vec<C64>; 4],
}

/// Precomputed exponentials and weights for one time step.
pub struct EtdStepper {
    pub order: EtdOrder,
    pub dt: f64,
    chans: Vec<Coeffs>,
}

/// Multi-channel spectral state.
pub type SpecState = Vec<Vec<C64>>;

impl EtdStepper {
    /// `linear[c][k]` is the symbol of channel `c` at bin `k`.
    pub fn new(linear: &[Vec<C64>], dt: f64, order: EtdOrder) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let chans = linear
            .iter()
            .map(|l| {
                let mut c = Coeffs {
                    e: Vec::with_capacity(l.len()),
                    e2: Vec::with_capacity(l.len()),
                    w: Default::default(),
                };
                for &lk in l {
                    let z = lk * dt;
                    c.e.push(z.exp());
                    c.e2.push((z * 0.5).exp());
                    match order {
                        EtdOrder::Etdrk2 => {
                            c.w[0].push(phi1(z) * dt);
                            c.w[1].push(phi2(z) * dt);
                        }
                        EtdOrder::Etdrk4 => {
                            c.w[0].push(phi1(z * 0.5) * (0.5 * dt));
                            let [f1, f2, f3] = etd4_weights(z);
                            c.w[1].push(f1 * dt);
                            c.w[2].push(f2 * dt);
                            c.w[3].push(f3 * dt);
                        }
                    }
                }
                c
            })
            .collect();
        Ok(EtdStepper { order, dt, chans })
    }

    /// Advances `u` by one step. `n` evaluates the nonlinear term in Fourier space.
    pub fn step(&self, u: &mut SpecState, n: &mut dyn FnMut(&SpecState) -> Result<SpecState>) -> Result<()> {
        if u.len() != self.chans.len() || u.iter().zip(&self.chans).any(|(a, c)| a.len() != c.e.len()) {
            return Err(shape_err!("state does not match the stepper layout"));
        }
        let nu = n(u)?;
        match self.order {
            EtdOrder::Etdrk2 => {
                let mut a = u.clone();
                for (ci, c) in self.chans.iter().enumerate() {
                    for k in 0..c.e.len() {
                        a[ci][k] = c.e[k] * u[ci][k] + c.w[0][k] * nu[ci][k];
                    }
                }
                let na = n(&a)?;
                for (ci, c) in self.chans.iter().enumerate() {
                    for k in 0..c.e.len() {
                        u[ci][k] = a[ci][k] + c.w[1][k] * (na[ci][k] - nu[ci][k]);
                    }
                }
            }
            EtdOrder::Etdrk4 => {
                let mut a = u.clone();
                for (ci, c) in self.chans.iter().enumerate() {
                    for k in 0..c.e.len() {
                        a[ci][k] = c.e2[k] * u[ci][k] + c.w[0][k] * nu[ci][k];
                    }
                }
                let na = n(&a)?;
                let mut b = u.clone();
                for (ci, c) in self.chans.iter().enumerate() {
                    for k in 0..c.e.len() {
                        b[ci][k] = c.e2[k] * u[ci][k] + c.w[0][k] * na[ci][k];
                    }
                }
                let nb = n(&b)?;
                let mut cc = a.clone();
                for (ci, c) in self.chans.iter().enumerate() {
                    for k in 0..c.e.len() {
                        cc[ci][k] = c.e2[k] * a[ci][k] + c.w[0][k] * (nb[ci][k] * 2.0 - nu[ci][k]);
                    }
                }
                let nc = n(&cc)?;
                for (ci, c) in self.chans.iter().enumerate() {
                    for k in 0..c.e.len() {
                        u[ci][k] = c.e[k] * u[ci][k]
                            + c.w[1][k] * nu[ci][k]
                            + c.w[2][k] * (na[ci][k] + nb[ci][k]) * 2.0
                            + c.w[3][k] * nc[ci][k];
                    }
                }
            }
        }
        Ok(())
    }
}

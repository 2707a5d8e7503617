//! The PDE families, their parameter ranges, and right-hand sides split into
//! a diagonal linear symbol and a pseudo-spectral nonlinear term.
//!
//! | family  | equation                                              |
//! |---------|-------------------------------------------------------|
//! | hyp     | `u_t = −ν ∇⁴u`                                        |
//! | fisher  | `u_t = ν Δu + r u (1 − u)`                            |
//! | sh      | `u_t = r u − (k² + Δ)² u − u³`                        |
//! | gs-*    | `a_t = d_a Δa − a b² + f (1 − a)`, `b_t = d_b Δb + a b² − (f + κ) b` |
//! | burgers | `u_t = −½ ∇·(u ⊗ u) + ν Δu`                           |
//! | kdv     | `u_t = −3 ∇·(u ⊗ u) − Σ_j ∂_j³ u + ν Δu`              |
//! | ks      | `u_t = −Δu − Δ²u − ½ |∇u|²`                           |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spectral::{Grid, C64};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GsVariant {
    Alpha,
    Beta,
    Gamma,
    Delta,
    Epsilon,
    Theta,
    Iota,
    Kappa,
}

/// Feed rate, kill rate, stored time step, warmup in stored steps.
struct GsTable {
    feed: f64,
    kill: f64,
    dt_store: f64,
    warmup: usize,
}

impl GsVariant {
    pub const ALL: [GsVariant; 8] = [
        GsVariant::Alpha,
        GsVariant::Beta,
        GsVariant::Gamma,
        GsVariant::Delta,
        GsVariant::Epsilon,
        GsVariant::Theta,
        GsVariant::Iota,
        GsVariant::Kappa,
    ];

    fn table(self) -> GsTable {
        let (feed, kill, dt_store, warmup) = match self {
            GsVariant::Alpha => (0.008, 0.046, 30.0, 75),
            GsVariant::Beta => (0.020, 0.046, 30.0, 50),
            GsVariant::Gamma => (0.024, 0.056, 75.0, 70),
            GsVariant::Delta => (0.028, 0.056, 130.0, 0),
            GsVariant::Epsilon => (0.020, 0.056, 15.0, 300),
            GsVariant::Theta => (0.040, 0.060, 200.0, 0),
            GsVariant::Iota => (0.050, 0.0605, 240.0, 0),
            GsVariant::Kappa => (0.052, 0.063, 300.0, 15),
        };
        GsTable {
            feed,
            kill,
            dt_store,
            warmup,
        }
    }

    pub fn feed(self) -> f64 {
        self.table().feed
    }

    pub fn kill(self) -> f64 {
        self.table().kill
    }

    /// Central fraction of the domain holding the initial bumps.
    pub fn blob_fraction(self) -> f64 {
        if self == GsVariant::Kappa {
            0.2
        } else {
            0.6
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            GsVariant::Alpha => "alpha",
            GsVariant::Beta => "beta",
            GsVariant::Gamma => "gamma",
            GsVariant::Delta => "delta",
            GsVariant::Epsilon => "epsilon",
            GsVariant::Theta => "theta",
            GsVariant::Iota => "iota",
            GsVariant::Kappa => "kappa",
        }
    }
}

pub const GS_DIFFUSIVITY: [f64; 2] = [2e-5, 1e-5];
pub const KDV_CONVECTION: f64 = -6.0;
pub const BURGERS_CONVECTION: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    Hyp,
    Fisher,
    Sh,
    Gs(GsVariant),
    Burgers,
    Kdv,
    Ks,
}

/// A varied parameter and its half-open sampling range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

const fn range(name: &'static str, lo: f64, hi: f64) -> ParamRange {
    ParamRange { name, lo, hi }
}

/// Default time stepping of a family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stepping {
    pub dt_store: f64,
    pub substeps: usize,
    pub warmup: usize,
}

impl Family {
    pub const ALL: [Family; 14] = [
        Family::Hyp,
        Family::Fisher,
        Family::Sh,
        Family::Gs(GsVariant::Alpha),
        Family::Gs(GsVariant::Beta),
        Family::Gs(GsVariant::Gamma),
        Family::Gs(GsVariant::Delta),
        Family::Gs(GsVariant::Epsilon),
        Family::Gs(GsVariant::Theta),
        Family::Gs(GsVariant::Iota),
        Family::Gs(GsVariant::Kappa),
        Family::Burgers,
        Family::Kdv,
        Family::Ks,
    ];

    /// Position in [`Family::ALL`], used as class label.
    pub fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).expect("listed")
    }

    pub fn name(self) -> String {
        match self {
            Family::Hyp => "hyp".into(),
            Family::Fisher => "fisher".into(),
            Family::Sh => "sh".into(),
            Family::Gs(v) => format!("gs-{}", v.suffix()),
            Family::Burgers => "burgers".into(),
            Family::Kdv => "kdv".into(),
            Family::Ks => "ks".into(),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Family::Gs(_) => 2,
            Family::Burgers | Family::Kdv => 3,
            _ => 1,
        }
    }

    pub fn channel_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Family::Gs(_) => &["c_a", "c_b"],
            Family::Burgers | Family::Kdv => &["u_x", "u_y", "u_z"],
            Family::Fisher | Family::Sh => &["concentration"],
            _ => &["density"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn ranges(self) -> Vec<ParamRange> {
        match self {
            Family::Hyp => vec![range("hyper_diffusivity", 5e-5, 5e-4)],
            Family::Fisher => vec![range("diffusivity", 1e-4, 0.02), range("reactivity", 5.0, 15.0)],
            Family::Sh => vec![range("reactivity", 0.4, 1.0), range("critical_number", 0.8, 1.2)],
            Family::Gs(_) => vec![],
            Family::Burgers => vec![range("viscosity", 1e-3, 5e-3)],
            Family::Kdv => vec![range("domain_extent", 30.0, 120.0), range("viscosity", 0.1, 0.25)],
            Family::Ks => vec![range("domain_extent", 10.0, 130.0)],
        }
    }

    /// Domain side for families with a fixed extent.
    fn fixed_domain(self) -> Option<f64> {
        match self {
            Family::Hyp | Family::Fisher | Family::Burgers => Some(1.0),
            Family::Sh => Some(20.0 * std::f64::consts::PI),
            Family::Gs(_) => Some(2.5),
            Family::Kdv | Family::Ks => None,
        }
    }

    pub fn stepping(self) -> Stepping {
        let (dt_store, substeps, warmup) = match self {
            Family::Hyp => (0.01, 1, 0),
            Family::Fisher => (0.005, 1, 0),
            Family::Sh => (0.5, 5, 0),
            Family::Gs(v) => {
                let t = v.table();
                (t.dt_store, t.dt_store.round() as usize, t.warmup)
            }
            Family::Burgers => (0.01, 50, 0),
            Family::Kdv => (0.05, 10, 0),
            Family::Ks => (0.2, 2, 200),
        };
        Stepping {
            dt_store,
            substeps,
            warmup,
        }
    }

    pub fn is_linear(self) -> bool {
        self == Family::Hyp
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown PDE family {s:?}")))
    }
}

impl TryFrom<String> for Family {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.name()
    }
}

/// A family with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeSpec {
    pub family: Family,
    /// Values in the order of [`Family::ranges`].
    pub params: Vec<f64>,
}

impl PdeSpec {
    pub fn new(family: Family, params: Vec<f64>) -> Result<Self> {
        let ranges = family.ranges();
        if params.len() != ranges.len() {
            return Err(Error::Config(format!(
                "{family} takes {} parameters, got {}",
                ranges.len(),
                params.len()
            )));
        }
        for (r, &v) in ranges.iter().zip(&params) {
            if !(v >= r.lo && v < r.hi) {
                return Err(Error::Config(format!(
                    "{family}: {} = {v} outside [{}, {})",
                    r.name, r.lo, r.hi
                )));
            }
        }
        Ok(PdeSpec { family, params })
    }

    pub fn sample<R: Rng + ?Sized>(family: Family, rng: &mut R) -> Self {
        let params = family.ranges().iter().map(|r| rng.random_range(r.lo..r.hi)).collect();
        PdeSpec { family, params }
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.family
            .ranges()
            .iter()
            .position(|r| r.name == name)
            .map(|i| self.params[i])
    }

    fn req(&self, name: &str) -> f64 {
        self.param(name).expect("parameter of this family")
    }

    /// Parameters mapped linearly from their ranges to `[0, 1)`.
    pub fn normalized(&self) -> Vec<f64> {
        self.family
            .ranges()
            .iter()
            .zip(&self.params)
            .map(|(r, v)| (v - r.lo) / (r.hi - r.lo))
            .collect()
    }

    pub fn domain(&self) -> f64 {
        self.family.fixed_domain().unwrap_or_else(|| self.req("domain_extent"))
    }

    /// Linear symbol per channel at each stored bin of `grid`.
    pub fn linear(&self, grid: &Grid) -> Vec<Vec<C64>> {
        let per = |f: &dyn Fn(&[f64; 3], f64) -> C64| -> Vec<C64> {
            grid.k.iter().zip(&grid.k2).map(|(k, &k2)| f(k, k2)).collect()
        };
        let re = |v: f64| C64::new(v, 0.0);
        match self.family {
            Family::Hyp => {
                let nu = self.req("hyper_diffusivity");
                vec![per(&|_, k2| re(-nu * k2 * k2))]
            }
            Family::Fisher => {
                let nu = self.req("diffusivity");
                vec![per(&|_, k2| re(-nu * k2))]
            }
            Family::Sh => {
                let (r, kc) = (self.req("reactivity"), self.req("critical_number"));
                vec![per(&|_, k2| re(r - (kc * kc - k2).powi(2)))]
            }
            Family::Gs(_) => GS_DIFFUSIVITY.iter().map(|&d| per(&|_, k2| re(-d * k2))).collect(),
            Family::Burgers => {
                let nu = self.req("viscosity");
                vec![per(&|_, k2| re(-nu * k2)); 3]
            }
            Family::Kdv => {
                let nu = self.req("viscosity");
                vec![per(&|k, k2| C64::new(-nu * k2, k.iter().map(|v| v * v * v).sum())); 3]
            }
            Family::Ks => vec![per(&|_, k2| re(k2 - k2 * k2))],
        }
    }

    /// Nonlinear term in Fourier space, truncated by the two-thirds rule.
    pub fn nonlinear(&self, grid: &Grid, u: &[Vec<C64>]) -> Result<Vec<Vec<C64>>> {
        let phys = |h: &[C64]| grid.inverse(h);
        let mut out = match self.family {
            Family::Hyp => vec![vec![C64::default(); grid.spectral_len()]],
            Family::Fisher => {
                let r = self.req("reactivity");
                let p: Vec<f64> = phys(&u[0])?.into_iter().map(|v| r * v * (1.0 - v)).collect();
                vec![grid.forward(&p)?]
            }
            Family::Sh => {
                let p: Vec<f64> = phys(&u[0])?.into_iter().map(|v| -v * v * v).collect();
                vec![grid.forward(&p)?]
            }
            Family::Gs(v) => {
                let (f, k) = (v.feed(), v.kill());
                let (a, b) = (phys(&u[0])?, phys(&u[1])?);
                let mut na = Vec::with_capacity(a.len());
                let mut nb = Vec::with_capacity(a.len());
                for (&ai, &bi) in a.iter().zip(&b) {
                    let r = ai * bi * bi;
                    na.push(-r + f * (1.0 - ai));
                    nb.push(r - (f + k) * bi);
                }
                vec![grid.forward(&na)?, grid.forward(&nb)?]
            }
            Family::Burgers => convection(grid, u, BURGERS_CONVECTION)?,
            Family::Kdv => convection(grid, u, KDV_CONVECTION)?,
            Family::Ks => {
                let mut g2 = vec![0.0; grid.physical_len()];
                for a in 0..3 {
                    for (acc, v) in g2.iter_mut().zip(phys(&grid.deriv(&u[0], a))?) {
                        *acc += v * v;
                    }
                }
                g2.iter_mut().for_each(|v| *v *= -0.5);
                vec![grid.forward(&g2)?]
            }
        };
        for h in &mut out {
            grid.dealias(h);
        }
        Ok(out)
    }
}

/// `(b/2) Σ_j ∂_j(u_i u_j)` for each component `i`.
fn convection(grid: &Grid, u: &[Vec<C64>], b: f64) -> Result<Vec<Vec<C64>>> {
    let p: Vec<Vec<f64>> = u.iter().map(|h| grid.inverse(h)).collect::<Result<_>>()?;
    let mut out = vec![vec![C64::default(); grid.spectral_len()]; 3];
    for i in 0..3 {
        for j in i..3 {
            let prod: Vec<f64> = p[i].iter().zip(&p[j]).map(|(x, y)| x * y).collect();
            let ph = grid.forward(&prod)?;
            // u_i u_j enters component i through ∂_j and component j through ∂_i
            let dj = grid.deriv(&ph, j);
            for (o, d) in out[i].iter_mut().zip(&dj) {
                *o += d * (b / 2.0);
            }
            if i != j {
                let di = grid.deriv(&ph, i);
                for (o, d) in out[j].iter_mut().zip(&di) {
                    *o += d * (b / 2.0);
                }
            }
        }
    }
    Ok(out)
}

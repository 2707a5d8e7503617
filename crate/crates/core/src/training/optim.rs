//! AdamW with decoupled weight decay, and an exponential moving average of
//! the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            weight_decay: 1e-15,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: moments per parameter and the number of updates so far.
/// A parameter's bias correction uses its own update count, so parameters
/// that sit out some steps are corrected consistently.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub counts: Vec<u64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            counts: vec![0; store.len()],
        }
    }

    /// Updates every parameter flagged in `active`; the others keep their
    /// values and moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], active: &[bool]) -> Result<()> {
        if grads.len() != store.len() || active.len() != store.len() || self.m.len() != store.len() {
            return Err(shape_err!(
                "optimizer state for {} parameters, store has {}, {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            ));
        }
        let c = self.cfg;
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let g = &grads[i];
            if g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(shape_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            self.counts[i] += 1;
            let n = self.counts[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(n);
            let bc2 = 1.0 - c.beta2.powi(n);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pj, &gj), mj), vj) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gf = gj.to_f64_lossy();
                let mf = c.beta1 * mj.to_f64_lossy() + (1.0 - c.beta1) * gf;
                let vf = c.beta2 * vj.to_f64_lossy() + (1.0 - c.beta2) * gf * gf;
                *mj = T::from_f64_lossy(mf);
                *vj = T::from_f64_lossy(vf);
                let pf = pj.to_f64_lossy();
                let upd = (mf / bc1) / ((vf / bc2).sqrt() + c.eps) + c.weight_decay * pf;
                *pj = T::from_f64_lossy(pf - c.lr * upd);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(decay: f64, store: &ParamStore<T>) -> Self {
        Ema {
            decay,
            shadow: store.clone(),
        }
    }

    /// `ema ← decay·ema + (1 − decay)·weights`.
    pub fn update(&mut self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.shadow.len() {
            return Err(shape_err!(
                "EMA tracks {} parameters, store has {}",
                self.shadow.len(),
                store.len()
            ));
        }
        let d = self.decay;
        for (e, w) in self.shadow.tensors_mut().iter_mut().zip(store.tensors()) {
            *e = e.zip_map(w, |a, b| {
                T::from_f64_lossy(d * a.to_f64_lossy() + (1.0 - d) * b.to_f64_lossy())
            })?;
        }
        Ok(())
    }
}

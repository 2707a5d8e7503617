//! Joint embedding of diffusion time, physical parameters and class labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Init, ParamId, Scalar, Session, Tensor, Var};

/// Width of the sinusoidal frequency features.
pub const FREQ_DIM: usize = 32;
const FREQ_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Conditioning for one sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    #[serde(default)]
    pub params: Vec<f64>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub t: Option<f64>,
}

impl Conditioning {
    pub fn with_t(&self, t: f64) -> Self {
        Conditioning {
            t: Some(t),
            ..self.clone()
        }
    }
}

/// `[cos(v·f_i), sin(v·f_i)]` with geometrically spaced frequencies.
pub fn sinusoid(v: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        out[i] = (v * f).cos();
        out[half + i] = (v * f).sin();
    }
    out
}

#[derive(Clone, Debug)]
struct Mlp2 {
    a: Linear,
    b: Linear,
}

impl Mlp2 {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, fin: usize, d: usize) -> Self {
        init.scoped(name, |init| Mlp2 {
            a: Linear::new(init, "fc1", fin, d, true),
            b: Linear::new(init, "fc2", d, d, true),
        })
    }

    fn fwd<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.b.fwd(sess, self.a.fwd(sess, x)?.silu())
    }
}

#[derive(Clone, Debug)]
pub struct CondEmbedder {
    time: Option<Mlp2>,
    params: Vec<Mlp2>,
    labels: Option<ParamId>,
    dim: usize,
}

impl CondEmbedder {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Self {
        init.scoped("cond", |init| CondEmbedder {
            time: cfg.time_embed.then(|| Mlp2::new(init, "time", FREQ_DIM, cfg.cond_dim)),
            params: (0..cfg.num_params)
                .map(|i| Mlp2::new(init, &format!("param{i}"), FREQ_DIM, cfg.cond_dim))
                .collect(),
            labels: (cfg.num_labels > 0).then(|| init.normal("labels", &[cfg.num_labels, cfg.cond_dim], 0.02)),
            dim: cfg.cond_dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for m in self.time.iter().chain(&self.params) {
            p.extend(m.a.params());
            p.extend(m.b.params());
        }
        p.extend(self.labels);
        p
    }

    /// `[B, cond_dim]` embedding; absent parts feed zero features to their MLP.
    pub fn fwd<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, conds: &[Conditioning]) -> Result<Var<'g, T>> {
        let g = sess.graph;
        let b = conds.len();
        if b == 0 {
            return Err(Error::Config("empty conditioning batch".into()));
        }
        let mut acc = g.constant(Tensor::zeros(&[b, self.dim]));
        let feats = |f: &dyn Fn(&Conditioning) -> Option<f64>| -> Tensor<T> {
            let mut data = Vec::with_capacity(b * FREQ_DIM);
            for c in conds {
                match f(c) {
                    Some(v) => data.extend(sinusoid(v * FREQ_SCALE, FREQ_DIM).into_iter().map(T::from_f64_lossy)),
                    None => data.extend(std::iter::repeat_n(T::zero(), FREQ_DIM)),
                }
            }
            Tensor::new(&[b, FREQ_DIM], data).expect("feature shape")
        };
        if let Some(mlp) = &self.time {
            let x = g.constant(feats(&|c| c.t));
            acc = acc.add(mlp.fwd(sess, x)?)?;
        } else if conds.iter().any(|c| c.t.is_some()) {
            return Err(Error::Config("model has no diffusion-time embedding".into()));
        }
        if let Some(c) = conds.iter().find(|c| c.params.len() > self.params.len()) {
            return Err(Error::Config(format!(
                "conditioning has {} parameters, model expects at most {}",
                c.params.len(),
                self.params.len()
            )));
        }
        for (i, mlp) in self.params.iter().enumerate() {
            let x = g.constant(feats(&|c| c.params.get(i).copied()));
            acc = acc.add(mlp.fwd(sess, x)?)?;
        }
        if let Some(table) = self.labels {
            let n = sess.store.get(table).shape()[0];
            let mut idx = Vec::with_capacity(b);
            let mut mask = Vec::with_capacity(b);
            for c in conds {
                match c.label {
                    Some(l) if l < n => {
                        idx.push(l);
                        mask.push(T::one());
                    }
                    Some(l) => return Err(Error::Config(format!("label {l} out of range {n}"))),
                    None => {
                        idx.push(0);
                        mask.push(T::zero());
                    }
                }
            }
            let rows = sess.p(table).gather_rows(&idx)?;
            let mask = g.constant(Tensor::new(&[b, 1], mask)?);
            acc = acc.add(rows.mul(mask)?)?;
        } else if conds.iter().any(|c| c.label.is_some()) {
            return Err(Error::Config("model has no label table".into()));
        }
        Ok(acc)
    }
}

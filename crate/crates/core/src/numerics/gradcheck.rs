//! Central finite-difference checks of reverse-mode gradients in f64.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Comparison for one input tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub numel: usize,
    /// Worst relative error over the sampled entries.
    pub max_entry_rel_err: f64,
    /// Relative error of the derivative along a random unit direction.
    pub directional_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_entry_rel_err.max(t.directional_rel_err))
            .fold(0.0, f64::max)
    }
}

/// Magnitude below which gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(f(&g, &vars)?.value().item())
}

/// Checks every input tensor of the scalar function `f`: `entries` randomly
/// chosen coordinates plus one random direction.
pub fn check<F, R>(f: F, inputs: &[Tensor<f64>], h: f64, entries: usize, floor: f64, rng: &mut R) -> Result<CheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    R: Rng,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut tensors = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let mut max_entry: f64 = 0.0;
        for e in sample(rng, n, entries.min(n)).into_iter() {
            work[ti].data_mut()[e] = input.data()[e] + h;
            let up = eval(&f, &work)?;
            work[ti].data_mut()[e] = input.data()[e] - h;
            let dn = eval(&f, &work)?;
            work[ti].data_mut()[e] = input.data()[e];
            let numeric = (up - dn) / (2.0 * h);
            max_entry = max_entry.max(rel_err(analytic[ti].data()[e], numeric, floor));
        }
        let dir = Tensor::<f64>::randn(input.shape(), rng);
        let dn_norm = dir.norm().max(1e-300);
        let dir = dir.map(|v| v / dn_norm);
        let along: f64 = analytic[ti].data().iter().zip(dir.data()).map(|(a, d)| a * d).sum();
        work[ti] = input.zip_map(&dir, |x, d| x + h * d)?;
        let up = eval(&f, &work)?;
        work[ti] = input.zip_map(&dir, |x, d| x - h * d)?;
        let dn = eval(&f, &work)?;
        work[ti] = input.clone();
        let numeric = (up - dn) / (2.0 * h);
        tensors.push(TensorCheck {
            index: ti,
            numel: n,
            max_entry_rel_err: max_entry,
            directional_rel_err: rel_err(along, numeric, floor),
        });
    }
    Ok(CheckReport { tensors })
}

//! Finite-difference audit of every parameter gradient of the full network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Conditioning, ModelConfig, P3d};
use crate::error::Result;
use crate::numerics::gradcheck::{self, TensorCheck};
use crate::numerics::{mse, Graph, ParamStore, Session, Tensor, Var};

/// Worst relative error of one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub check: TensorCheck,
}

impl ParamCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.check.max_entry_rel_err.max(self.check.directional_rel_err)
    }
}

/// Builds the model in f64, perturbs every parameter by `0.1·N(0, 1)` so
/// zero-initialised branches carry gradient, and compares the MSE-loss
/// gradient of each parameter tensor against central differences at
/// `entries` random coordinates plus one random direction.
pub fn audit_gradients(
    cfg: &ModelConfig,
    dims: [usize; 3],
    seed: u64,
    entries: usize,
    h: f64,
) -> Result<Vec<ParamCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let m = P3d::new(cfg, &mut store, &mut rng)?;
    for t in store.tensors_mut() {
        let noise = Tensor::<f64>::randn(t.shape(), &mut rng);
        *t = t.zip_map(&noise, |a, n| a + 0.1 * n)?;
    }
    let ids: Vec<_> = store.ids().collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| store.get(i).clone()).collect();
    let x = Tensor::<f64>::randn(&[1, cfg.in_channels, dims[0], dims[1], dims[2]], &mut rng);
    let target = Tensor::<f64>::randn(&[1, cfg.out_channels, dims[0], dims[1], dims[2]], &mut rng);
    let report = gradcheck::check(
        |g: &Graph<f64>, v: &[Var<'_, f64>]| {
            let sess = Session::new(g, &store);
            for (k, &id) in ids.iter().enumerate() {
                sess.bind(id, v[k])?;
            }
            let y = m.forward(&sess, g.constant(x.clone()), &[Conditioning::default()])?;
            mse(y, g.constant(target.clone()))
        },
        &inputs,
        h,
        entries,
        gradcheck::REL_FLOOR,
        &mut rng,
    )?;
    Ok(report
        .tensors
        .into_iter()
        .map(|check| ParamCheck {
            name: store.name(ids[check.index]).to_string(),
            check,
        })
        .collect())
}

//! Flow-matching path, loss and the explicit Euler sampler.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numerics::{mse, s, Scalar, Tensor, Var};

/// Noise level remaining at `t = 1`.
pub const SIGMA_MIN: f64 = 1e-4;

/// Point on the probability path: `t·u_out + (1 − (1 − σ)·t)·ε`.
pub fn fm_sample_xt<T: Scalar>(u_out: &Tensor<T>, eps: &Tensor<T>, t: f64, sigma_min: f64) -> Result<Tensor<T>> {
    let a = s::<T>(t);
    let b = s::<T>(1.0 - (1.0 - sigma_min) * t);
    u_out.zip_map(eps, |u, e| a * u + b * e)
}

/// Velocity of the path, `u_out − (1 − σ)·ε`, independent of `t`.
pub fn fm_target<T: Scalar>(u_out: &Tensor<T>, eps: &Tensor<T>, sigma_min: f64) -> Result<Tensor<T>> {
    let c = s::<T>(1.0 - sigma_min);
    u_out.zip_map(eps, |u, e| u - c * e)
}

/// Mean squared error between a predicted velocity and the path velocity.
pub fn fm_loss<'g, T: Scalar>(
    model_out: Var<'g, T>,
    u_out: &Tensor<T>,
    eps: &Tensor<T>,
    sigma_min: f64,
) -> Result<Var<'g, T>> {
    let target = fm_target(u_out, eps, sigma_min)?;
    mse(model_out, model_out.graph().constant(target))
}

/// A velocity field `v(x, t)` over fields of a fixed shape.
pub trait VelocityModel<T: Scalar> {
    fn velocity(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>>;
}

impl<T: Scalar, F: Fn(&Tensor<T>, f64) -> Result<Tensor<T>>> VelocityModel<T> for F {
    fn velocity(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self(x, t)
    }
}

/// Integrates `dx/dt = v(x, t)` from `x_0 ~ N(0, I)` at `t = 0` to `t = 1`
/// with `steps` explicit Euler steps.
pub fn euler_sample<T: Scalar, M: VelocityModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shape: &[usize],
    steps: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    euler_integrate(model, Tensor::randn(shape, rng), steps)
}

/// Euler integration from a given start state.
pub fn euler_integrate<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x0: Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(shape_err!("sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let v = model.velocity(&x, k as f64 * dt)?;
        if v.shape() != x.shape() {
            return Err(shape_err!(
                "velocity shape {:?} differs from state {:?}",
                v.shape(),
                x.shape()
            ));
        }
        let h = s::<T>(dt);
        x = x.zip_map(&v, |a, b| a + h * b)?;
    }
    Ok(x)
}

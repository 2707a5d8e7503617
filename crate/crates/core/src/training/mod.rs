//! Supervised and flow-matching training, sampling, crop and gradient-scope
//! setups, optimizer and checkpoints.

pub mod checkpoint;
mod data;
mod flow;
mod optim;
mod setup;
mod trainer;

pub use checkpoint::Manifest;
pub use data::{pad_channels, stack, PairDataset, Trajectory};
pub use flow::{euler_integrate, euler_sample, fm_loss, fm_sample_xt, fm_target, VelocityModel, SIGMA_MIN};
pub use optim::{AdamW, AdamWConfig, Ema};
pub use setup::{crop_sample, grad_scope, Objective, TrainMode, TrainSetup};
pub use trainer::{Batch, StepStats, Trainer};

use crate::backbone::{Conditioning, P3d};
use crate::error::Result;
use crate::numerics::{ParamStore, Scalar, Tensor};

/// Mean squared error between two tensors.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let d = pred.zip_map(target, |a, b| a - b)?;
    Ok(d.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / d.numel().max(1) as f64)
}

/// Velocity field of a backbone trained with flow matching, for one batch of
/// conditioning and an optional previous state stacked before the noisy field.
pub struct P3dVelocity<'a, T> {
    pub model: &'a P3d,
    pub store: &'a ParamStore<T>,
    pub u_in: Option<Tensor<T>>,
    pub conds: Vec<Conditioning>,
}

impl<T: Scalar> VelocityModel<T> for P3dVelocity<'_, T> {
    fn velocity(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let input = match &self.u_in {
            Some(u) => Tensor::concat(&[u, x], 1)?,
            None => x.clone(),
        };
        let conds: Vec<Conditioning> = self.conds.iter().map(|c| c.with_t(t)).collect();
        self.model.predict(self.store, &input, &conds)
    }
}

//! In-memory training pairs built from stored trajectories.

use crate::backbone::Conditioning;
use crate::error::{shape_err, Result};
use crate::numerics::{Scalar, Tensor};

/// Consecutive states `[C, X, Y, Z]` of one simulation and its conditioning.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub states: Vec<Tensor<T>>,
    pub cond: Conditioning,
}

/// All `(state_k, state_{k+1})` pairs of a set of trajectories.
#[derive(Clone, Debug, Default)]
pub struct PairDataset<T> {
    pub trajectories: Vec<Trajectory<T>>,
    index: Vec<(usize, usize)>,
}

impl<T: Scalar> PairDataset<T> {
    pub fn new(trajectories: Vec<Trajectory<T>>) -> Result<Self> {
        let mut index = Vec::new();
        let shape = trajectories
            .first()
            .and_then(|t| t.states.first())
            .map(|s| s.shape().to_vec());
        for (i, tr) in trajectories.iter().enumerate() {
            for s in &tr.states {
                if Some(s.shape().to_vec()) != shape || s.ndim() != 4 {
                    return Err(shape_err!(
                        "trajectory {} has state {:?}, expected {:?}",
                        i,
                        s.shape(),
                        shape
                    ));
                }
            }
            for k in 1..tr.states.len() {
                index.push((i, k - 1));
            }
        }
        Ok(PairDataset { trajectories, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// `(input, target, conditioning)` of pair `i`.
    pub fn pair(&self, i: usize) -> (&Tensor<T>, &Tensor<T>, &Conditioning) {
        let (t, k) = self.index[i];
        let tr = &self.trajectories[t];
        (&tr.states[k], &tr.states[k + 1], &tr.cond)
    }

    /// Shape `[C, X, Y, Z]` shared by all states.
    pub fn state_shape(&self) -> Option<&[usize]> {
        self.trajectories
            .first()
            .and_then(|t| t.states.first())
            .map(|s| s.shape())
    }
}

/// Zero-pads (or rejects truncating) the channel axis of `[C, X, Y, Z]` to `n`.
pub fn pad_channels<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let c = t.shape()[0];
    if c > n {
        return Err(shape_err!("state has {} channels, model takes {}", c, n));
    }
    if c == n {
        return Ok(t.clone());
    }
    let mut shape = t.shape().to_vec();
    shape[0] = n - c;
    Tensor::concat(&[t, &Tensor::zeros(&shape)], 0)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = items.first() else {
        return Err(shape_err!("cannot stack zero tensors"));
    };
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(shape_err!("stacking {:?} with {:?}", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

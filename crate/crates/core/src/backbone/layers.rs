//! Parameterised building blocks shared by the backbone and the context model.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Init, PadMode, ParamId, Scalar, Session, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        init.scoped(name, |init| Linear {
            w: init.xavier("w", &[fan_in, fan_out], fan_in, fan_out),
            b: bias.then(|| init.zeros("b", &[fan_out])),
            fan_in,
            fan_out,
        })
    }

    /// Weight and bias start at zero.
    pub fn zero<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        init.scoped(name, |init| Linear {
            w: init.zeros("w", &[fan_in, fan_out]),
            b: bias.then(|| init.zeros("b", &[fan_out])),
            fan_in,
            fan_out,
        })
    }

    pub fn fwd<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(sess.p(self.w), self.b.map(|b| sess.p(b)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        init.scoped(name, |init| {
            let shape = [cout, cin, 3, 3, 3];
            let w = if zero {
                init.zeros("w", &shape)
            } else {
                init.xavier("w", &shape, cin * 27, cout * 27)
            };
            Conv {
                w,
                b: init.zeros("b", &[cout]),
                stride,
            }
        })
    }

    pub fn fwd<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>, pad: PadMode) -> Result<Var<'g, T>> {
        x.conv3d(sess.p(self.w), Some(sess.p(self.b)), self.stride, pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, groups: usize) -> Self {
        init.scoped(name, |init| GroupNorm {
            gamma: init.ones("gamma", &[channels]),
            beta: init.zeros("beta", &[channels]),
            groups,
        })
    }

    pub fn fwd<'g, T: Scalar>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.group_norm(self.groups, sess.p(self.gamma), sess.p(self.beta), NORM_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// `x · (1 + scale) + shift` with `scale`, `shift` of shape `[B, C]` broadcast
/// over the trailing axes of `x`.
pub fn modulate<'g, T: Scalar>(x: Var<'g, T>, scale: Var<'g, T>, shift: Var<'g, T>) -> Result<Var<'g, T>> {
    let xs = x.shape();
    let ss = scale.shape();
    let mut bshape = ss.clone();
    if xs.len() == 5 {
        bshape.extend([1, 1, 1]);
    } else {
        bshape.insert(1, 1);
    }
    let scale = scale.reshape(&bshape)?.add_scalar(1.0);
    let shift = shift.reshape(&bshape)?;
    x.mul(scale)?.add(shift)
}

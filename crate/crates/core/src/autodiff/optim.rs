//! Stochastic gradient descent with momentum.

use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum SGD state: one learning rate and one velocity buffer per
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    /// L2 penalty coefficient added to every gradient as `weight_decay * p`.
    pub weight_decay: f64,
    lrs: Vec<f64>,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocities shaped like `params`, with learning rates from `lr_of`.
    pub fn new(
        params: &ParamStore<T>,
        momentum: f64,
        mut lr_of: impl FnMut(ParamId) -> f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} not in [0, 1)")));
        }
        let lrs: Vec<f64> = params.ids().map(&mut lr_of).collect();
        if let Some(bad) = lrs.iter().find(|lr| !(lr.is_finite() && **lr >= 0.0)) {
            return Err(Error::Config(format!("invalid learning rate {bad}")));
        }
        Ok(OptimizerState {
            momentum,
            weight_decay: 0.0,
            lrs,
            velocity: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Result<Self> {
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid weight decay {weight_decay}")));
        }
        self.weight_decay = weight_decay;
        Ok(self)
    }

    pub fn from_parts(momentum: f64, weight_decay: f64, lrs: Vec<f64>, velocity: Vec<Tensor<T>>) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            lrs,
            velocity,
        }
    }

    pub fn lr(&self, id: ParamId) -> f64 {
        self.lrs[id.0]
    }

    pub fn lrs(&self) -> &[f64] {
        &self.lrs
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// One update per parameter tensor with a gradient:
/// `v <- momentum * v - lr * (g + weight_decay * p); p <- p + v`.
///
/// Parameters without a gradient and parameters whose learning rate is zero
/// are left untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors, store has {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter() {
        let p = params.get(id);
        if p.shape() != g.shape() || state.velocity[id.0].shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter `{}`", params.info(id).name),
            });
        }
    }
    let mu = T::from_f64(state.momentum);
    let wd = T::from_f64(state.weight_decay);
    for (id, g) in grads.iter() {
        if state.lrs[id.0] == 0.0 {
            continue;
        }
        let lr = T::from_f64(state.lrs[id.0]);
        let v = state.velocity[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vv = mu * *vv - lr * (gv + wd * *pv);
            *pv = *pv + *vv;
        }
    }
    Ok(())
}

//! Plain stochastic gradient descent with step decay.

use serde::{Deserialize, Serialize};

use super::{BoundParams, DepAudioNetParams, Gradients, Scalar, Tensor};
use crate::{Error, Result};

/// `lr(epoch) = lr0 · decay^floor(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn new(lr0: f64) -> Self {
        Self {
            lr0,
            decay: 0.9,
            every: 2,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.every.max(1)) as i32)
    }
}

/// `p ← p − lr·g`.
pub fn sgd_update<T: Scalar>(param: &mut Tensor<T>, grad: &[T], lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if grad.len() != param.data.len() {
        return Err(Error::shape(format!(
            "gradient of {} values for parameter of shape {:?}",
            grad.len(),
            param.shape
        )));
    }
    let lr = T::lit(lr);
    for (p, &g) in param.data.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// Applies one SGD step to every trainable tensor that received a gradient.
/// Batchnorm running statistics are not touched.
pub fn sgd_step<T: Scalar>(
    params: &mut DepAudioNetParams<T>,
    bound: &BoundParams,
    grads: &Gradients<T>,
    lr: f64,
) -> Result<()> {
    let handles = bound.named();
    for (name, tensor) in params.tensors_mut() {
        let Some((_, var)) = handles.iter().find(|(n, _)| *n == name) else {
            continue;
        };
        if let Some(g) = grads.get(*var) {
            sgd_update(tensor, g, lr)?;
        }
    }
    Ok(())
}

//! Nesterov-momentum optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::NetworkState;
use crate::tensor::{Real, Tensor};

/// Velocity buffers congruent with the parameter map.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(learning_rate: f64, momentum: f64, state: &NetworkState<T>) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Parameter(format!("learning rate {learning_rate} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} must lie in [0,1)")));
        }
        let velocity = state
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Ok(OptimizerState { learning_rate, momentum, velocity })
    }
}

/// One Nesterov update: v <- mu*v + g, w <- w - lr*(g + mu*v).
pub fn nesterov_step<T: Real>(
    state: &mut NetworkState<T>,
    opt: &mut OptimizerState<T>,
    grads: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let mu = T::from_f64(opt.momentum);
    let lr = T::from_f64(opt.learning_rate);

    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for tensor {name:?}")));
        }
        let w = state
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Consistency(format!("gradient for unknown tensor {name:?}")))?;
        if w.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} for tensor {name:?} of shape {:?}",
                g.shape(),
                w.shape()
            )));
        }
        let v = opt.velocity.get_mut(name).expect("velocity congruent with params");
        for ((wv, vv), gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + *gv;
            *wv = *wv - lr * (*gv + mu * *vv);
        }
    }
    Ok(())
}

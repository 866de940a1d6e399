//! RMSProp: `v <- a*v + (1-a)*g^2`, `w <- w - lr * g / (sqrt(v) + eps)`.

use serde::{Deserialize, Serialize};

use crate::arch::Param;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsPropConfig {
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            eps: 1e-8,
        }
    }
}

/// One in-place update of a flat parameter slice.
pub fn rmsprop_step<T: Real>(param: &mut [T], grad: &[T], v: &mut [T], lr: T, alpha: T, eps: T) {
    debug_assert!(param.len() == grad.len() && grad.len() == v.len());
    let one = T::one();
    for ((w, &g), s) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
        *s = alpha * *s + (one - alpha) * g * g;
        *w -= lr * g / (s.sqrt() + eps);
    }
}

/// Mean-square accumulators for every parameter of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub config: RmsPropConfig,
    /// Accumulator per parameter, in parameter-table order.
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Param<T>], config: RmsPropConfig) -> Self {
        Self {
            config,
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Update every parameter that has a gradient; `None` leaves it as is.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != self.v.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "rmsprop",
                format!(
                    "{} params, {} accumulators, {} gradients",
                    params.len(),
                    self.v.len(),
                    grads.len()
                ),
            ));
        }
        let (lr, alpha, eps) = (T::of(lr), T::of(self.config.alpha), T::of(self.config.eps));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
            let Some(g) = g else { continue };
            p.value.same_shape(g, "rmsprop")?;
            rmsprop_step(p.value.data_mut(), g.data(), v.data_mut(), lr, alpha, eps);
        }
        Ok(())
    }
}

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moments and step count of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Scalar> AdamSlot<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }

    pub fn reset(&mut self) {
        *self = Self::zeros(self.m.shape());
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
///
/// Every slot keeps its own step counter so a subset of parameters can be
/// restarted without disturbing the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub slots: Vec<AdamSlot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self { config, slots: params.into_iter().map(|p| AdamSlot::zeros(p.shape())).collect() }
    }

    /// Applies one update. Returns `Ok(false)` and leaves everything untouched
    /// when any gradient entry is not finite.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<bool> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} slots, {} params, {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.slots) {
            if p.shape() != g.shape() || p.shape() != s.m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec(), s.m.shape().to_vec()],
                });
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(false);
        }
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            s.t += 1;
            let bc1 = T::one() - b1.powi(s.t as i32);
            let bc2 = T::one() - b2.powi(s.t as i32);
            let (m, v) = (s.m.data_mut(), s.v.data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

use super::ParamRefsMut;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};

/// Adam with bias correction. The learning rate is supplied per step so a
/// schedule can drive it from outside.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

/// Serializable scalar part of the optimizer state; moments travel separately as raw buffers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
        }
    }

    /// Moment buffers in parameter order (empty before the first step).
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn restore(state: AdamState, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Self {
        Self {
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            step: state.step,
            first,
            second,
        }
    }

    /// Applies one update to every trainable param whose name passes `update`,
    /// then clears all gradients.
    pub fn step(&mut self, params: &mut ParamRefsMut<'_, T>, lr: f64, update: impl Fn(&str) -> bool) {
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "optimizer/param layout mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if p.trainable && update(name) {
                let (m, v) = (&mut self.first[i], &mut self.second[i]);
                for ((w, g), (mi, vi)) in p
                    .value
                    .iter_mut()
                    .zip(&p.grad)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mi = b1 * *mi + one_b1 * *g;
                    *vi = b2 * *vi + one_b2 * *g * *g;
                    *w = *w - step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
                }
            }
            p.zero_grad();
        }
    }
}

use serde::{Deserialize, Serialize};

use super::param::ParamStore;

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// Updates every parameter from its gradient, advances its step counter,
    /// then clears the gradient.
    pub fn step(&self, store: &mut ParamStore) {
        for p in store.iter_mut() {
            p.step += 1;
            let bc1 = 1.0 - self.beta1.powi(p.step as i32);
            let bc2 = 1.0 - self.beta2.powi(p.step as i32);
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                grad[i] = 0.0;
            }
        }
    }
}

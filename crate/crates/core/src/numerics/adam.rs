use super::ParamStore;
use crate::error::{arg_err, Error, Result};
use serde::{Deserialize, Serialize};

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
        Self {
            lr: 0.00025,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        adam_step(store, self.lr, self.beta1, self.beta2, self.eps)
    }
}

pub fn adam_step(store: &mut ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if !(lr >= 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0)
    {
        return arg_err(format!(
            "adam hyperparameters out of range: lr={lr} beta1={beta1} beta2={beta2} eps={eps}"
        ));
    }
    if !store.grads_pending() {
        return Err(Error::Consistency(
            "adam step without gradients; run backward first".into(),
        ));
    }
    store.adam_update(lr, beta1, beta2, eps);
    Ok(())
}

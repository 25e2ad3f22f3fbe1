//! Trainable parameters and the optimizers that update them.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensor plus per-parameter optimizer state. The state
/// buffers are allocated on first use, so a parameter that is never stepped
/// costs nothing beyond its values.
pub struct Param {
    pub name: String,
    pub value: Tensor,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let mut value = value;
        value.requires_grad = true;
        Param { name: name.into(), value, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Drop accumulated optimizer state, e.g. when a new training stage
    /// starts from a fresh optimizer.
    pub fn reset_state(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }
}

/// Update rule shared by every parameter in a training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerSpec {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        OptimizerSpec::Sgd { lr, momentum }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerSpec::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f32 {
        match *self {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }

    /// Apply one update step in place. Rejects non-finite gradients so a
    /// divergence is reported at the step that produced it, with the
    /// parameter name attached.
    pub fn step(&self, param: &mut Param, grad: &[f32]) -> Result<()> {
        let n = param.value.numel();
        if grad.len() != n {
            return Err(Error::shape(
                "optimizer step",
                format!("gradient has {} elements, parameter {} has {n}", grad.len(), param.name),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of parameter {}", param.name) });
        }
        match *self {
            OptimizerSpec::Sgd { lr, momentum } => {
                if momentum == 0.0 {
                    for (w, &g) in param.value.data_mut().iter_mut().zip(grad) {
                        *w -= lr * g;
                    }
                } else {
                    if param.m.len() != n {
                        param.m = vec![0.0; n];
                    }
                    for ((w, mv), &g) in
                        param.value.data_mut().iter_mut().zip(param.m.iter_mut()).zip(grad)
                    {
                        *mv = momentum * *mv - lr * g;
                        *w += *mv;
                    }
                }
            }
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                if param.m.len() != n {
                    param.m = vec![0.0; n];
                    param.v = vec![0.0; n];
                    param.t = 0;
                }
                param.t += 1;
                let bc1 = 1.0 - beta1.powi(param.t as i32);
                let bc2 = 1.0 - beta2.powi(param.t as i32);
                for (i, (w, &g)) in param.value.data_mut().iter_mut().zip(grad).enumerate() {
                    let m = beta1 * param.m[i] + (1.0 - beta1) * g;
                    let v = beta2 * param.v[i] + (1.0 - beta2) * g * g;
                    param.m[i] = m;
                    param.v[i] = v;
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// One moment pair per parameter shape, all zero.
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(shape_err("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

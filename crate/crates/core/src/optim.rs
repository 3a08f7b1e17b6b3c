use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam with the customary defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<S> {
    cfg: AdamWConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (ob1, ob2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let decay = S::of(1.0 - lr * c.weight_decay);
        let step = S::of(lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let eps = S::of(c.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                p[i] = p[i] * decay - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Linear decay to zero with no warmup: `base_lr · (1 − step/total)`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule of {total_steps} steps"
        )));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

//! Adam with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::ParamGrads;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Biases and normalization parameters are not decayed.
fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows, t.cols))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`; parameters without a gradient
    /// only receive weight decay.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = if decays(params.name(id)) {
                T::lit(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let p = params.get_mut(id);
            if decay != T::zero() {
                for x in p.data.iter_mut() {
                    *x -= decay * *x;
                }
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + one_b1 * gk;
                v.data[k] = b2 * v.data[k] + one_b2 * gk * gk;
                let denom = (v.data[k] * inv_bc2).sqrt() + eps;
                p.data[k] -= step_size * m.data[k] / denom;
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grads
        .grads
        .iter()
        .flatten()
        .flat_map(|g| g.data.iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / (norm + 1e-12)));
    }
    norm
}

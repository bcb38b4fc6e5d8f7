//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::param::{Freeze, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for a fixed parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Param<T>]) -> Self {
        let m: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            config,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update. `grads[i]` belongs to `params[i]`; frozen parameters and
    /// frozen elements of partially frozen ones are left untouched and their
    /// moments stay put.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(invalid("optimizer state, parameter and gradient lists differ in length"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.freeze.any_learnable() {
                let Some(g) = g else {
                    return Err(Error::MissingGrad(p.name.clone()));
                };
                if g.shape() != p.value.shape() {
                    return Err(invalid(alloc::format!("gradient shape for `{}`", p.name)));
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = T::from_f64_lossy(c.lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.freeze.any_learnable() {
                continue;
            }
            let g = grads[i].as_ref().expect("checked above").data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let frozen = &p.freeze;
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                if matches!(frozen, Freeze::Partial(_)) && frozen.is_frozen_at(j) {
                    continue;
                }
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                *w = *w - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

//! AdamW with decoupled weight decay.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 8e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// Optimizer state. Moment buffers are kept in `f64` and allocated on the
/// first step, one per parameter with the parameter's dims.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    moments: Vec<Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    dims: Vec<usize>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step_count: 0, moments: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of `params` from `grads` (same order, same dims). A
    /// non-finite gradient rejects the whole step and leaves state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("adamw", format!("{} params but {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.dims() != g.dims() {
                return Err(shape_err("adamw", format!("param {:?} vs grad {:?}", p.dims(), g.dims())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw gradient" });
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    dims: p.dims().to_vec(),
                    first: alloc::vec![0.0; p.len()],
                    second: alloc::vec![0.0; p.len()],
                })
                .collect();
        } else if self.moments.len() != params.len()
            || self.moments.iter().zip(params.iter()).any(|(m, p)| m.dims != p.dims())
        {
            return Err(shape_err("adamw", "parameter set changed between steps"));
        }

        self.step_count += 1;
        let AdamWConfig { learning_rate: lr, beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), m) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] as f64;
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * gi;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                let updated = pd[i] as f64 * decay - lr * mhat / (libm::sqrt(vhat) + eps);
                pd[i] = updated as f32;
            }
        }
        Ok(())
    }
}

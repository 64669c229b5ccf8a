//! Adam and the warm-up + cosine learning-rate schedule.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient has {found} entries, parameters have {expected}")]
    Shape { expected: usize, found: usize },
    #[error("non-finite gradient at index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Refuses non-finite gradients without
    /// touching the parameters or state.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), OptimError> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(OptimError::Shape {
                expected: self.m.len(),
                found: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFinite { index });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.m[i] == 0.0 {
                continue;
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to 1 over `warmup` steps, then cosine decay to 0
/// at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub warmup: usize,
    pub total: usize,
}

impl WarmupCosine {
    /// Warm-up covering the same fraction of training as 512 of 20 000 steps.
    pub fn scaled(total: usize) -> Self {
        Self {
            warmup: ((total as f64) * 512.0 / 20_000.0).round() as usize,
            total,
        }
    }

    pub fn multiplier(&self, step: usize) -> f64 {
        if step < self.warmup {
            return step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return 1.0;
        }
        let p = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

//! Adam with bias correction, linear warmup, and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::numerics::{Gradients, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must be given in the same
    /// order on every call.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            debug_assert_eq!(param.len(), grad.len());
            let precision = param.precision();
            for (j, (w, &g)) in param.data_mut().iter_mut().zip(grad.as_slice()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = precision.round(*w - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
    }
}

/// Linear warmup from zero to `peak` over `warmup_steps`, constant afterward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as usize,
        }
    }

    /// Rate for 1-based step `s`.
    pub fn rate(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.peak
        } else {
            self.peak * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Precision, Tape};

    #[test]
    fn warmup_is_linear_then_flat() {
        let s = WarmupSchedule::new(1e-3, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.rate(1) - 1e-4).abs() < 1e-18);
        assert!((s.rate(5) - 5e-4).abs() < 1e-18);
        assert_eq!(s.rate(10), 1e-3);
        assert_eq!(s.rate(99), 1e-3);
        assert_eq!(WarmupSchedule::new(1e-3, 100, 0.0).rate(1), 1e-3);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_gradient_sign() {
        let mut w = Matrix::from_rows(&[&[1.0, -1.0]], Precision::P64).unwrap();
        let g = Matrix::from_rows(&[&[0.3, -2.0]], Precision::P64).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut [&mut w], &[&g], 0.01);
        assert!((w.get(0, 0) - 0.99).abs() < 1e-6);
        assert!((w.get(0, 1) + 0.99).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_rows(&[&[3.0, 4.0]], Precision::P64).unwrap());
        let loss = tape.sum_squares(a);
        let mut grads = tape.backward(loss).unwrap();
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut w = Matrix::from_rows(&[&[2.0, -3.0]], Precision::P64).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let x = tape.leaf(w.clone());
            let loss = tape.sum_squares(x);
            let grads = tape.backward(loss).unwrap();
            adam.update(&mut [&mut w], &[grads.get(x).unwrap()], 0.01);
        }
        assert!(w.sum_squares() < 1e-3, "{w:?}");
    }
}

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub step_count: u64,
    pub first_moment: Vec<S>,
    pub second_moment: Vec<S>,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            step_count: 0,
            first_moment: vec![S::zero(); len],
            second_moment: vec![S::zero(); len],
            config,
        }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut [S], grad: Option<&[S]>, lr: f64) -> Result<()> {
        let grad = grad.ok_or(Error::MissingGradient)?;
        if grad.len() != param.len() || param.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "param {} / grad {} / state {}",
                    param.len(),
                    grad.len(),
                    self.first_moment.len()
                ),
            ));
        }
        self.step_count += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (S::of(beta1), S::of(beta2));
        let (one_b1, one_b2) = (S::of(1.0 - beta1), S::of(1.0 - beta2));
        let step_size = S::of(lr / bc1);
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());
        let eps = S::of(epsilon);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let denom = v.sqrt() * inv_sqrt_bc2 + eps;
            *p -= step_size * *m / denom;
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `decay_factor` once more than `patience`
/// consecutive observations fail to improve on the best loss seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub current_lr: f64,
    pub decay_factor: f64,
    pub patience: u32,
    pub best_loss: f64,
    pub steps_since_improvement: u32,
}

impl PlateauScheduler {
    pub fn new(lr: f64, decay_factor: f64, patience: u32) -> Self {
        PlateauScheduler {
            current_lr: lr,
            decay_factor,
            patience,
            best_loss: f64::INFINITY,
            steps_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.steps_since_improvement = 0;
        } else {
            self.steps_since_improvement += 1;
            if self.steps_since_improvement > self.patience {
                self.current_lr *= self.decay_factor;
                self.steps_since_improvement = 0;
            }
        }
        self.current_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut st = AdamState::<f64>::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, Some(&[0.0; 3]), 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut st = AdamState::<f32>::new(1, AdamConfig::default());
        assert!(matches!(
            st.step(&mut [0.0], None, 0.1),
            Err(Error::MissingGradient)
        ));
    }

    #[test]
    fn constant_gradient_steps_follow_closed_form() {
        // With a constant gradient g, m_t = g(1-b1^t) and v_t = g^2(1-b2^t),
        // so every bias-corrected step is lr*|g|/(|g|+eps).
        let (lr, g) = (0.05, 3.0);
        let cfg = AdamConfig::default();
        let mut st = AdamState::<f64>::new(1, cfg);
        let mut p = [0.0f64];
        let mut prev = 0.0;
        for t in 1..=200 {
            st.step(&mut p, Some(&[g]), lr).unwrap();
            let step = prev - p[0];
            let m = g * (1.0 - cfg.beta1.powi(t));
            let v = g * g * (1.0 - cfg.beta2.powi(t));
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            let vhat = v / (1.0 - cfg.beta2.powi(t));
            let expect = lr * mhat / (vhat.sqrt() + cfg.epsilon);
            assert!((step - expect).abs() < 1e-12, "t={t}");
            prev = p[0];
        }
        assert!(((prev / -200.0) - lr).abs() < 1e-8);
    }

    #[test]
    fn scheduler_monotone_losses_keep_lr() {
        let mut s = PlateauScheduler::new(1.0, 0.9, 1);
        for l in [1.0, 0.9, 0.8] {
            assert_eq!(s.observe(l), 1.0);
        }
    }

    #[test]
    fn scheduler_decays_on_plateau() {
        let mut s = PlateauScheduler::new(1.0, 0.9, 1);
        assert_eq!(s.observe(1.0), 1.0);
        assert_eq!(s.observe(1.0), 1.0);
        assert!((s.observe(1.0) - 0.9).abs() < 1e-15);
        assert!((s.observe(1.0) - 0.9).abs() < 1e-15);
        assert!((s.observe(1.0) - 0.81).abs() < 1e-15);
    }
}

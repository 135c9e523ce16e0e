//! Adam over the flat parameter vector of a [`ProjectionHead`].

use crate::error::{Error, Result};
use crate::projhead::{HeadGradients, ProjectionHead};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments sized for `head`.
    pub fn new(head: &ProjectionHead, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        // lr = 0 is allowed so a run can be frozen in place.
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, beta) in [("beta1", beta1), ("beta2", beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {beta}")));
            }
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        let n = head.num_parameters();
        Ok(Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        })
    }

    pub fn with_defaults(head: &ProjectionHead) -> Self {
        Self::new(head, DEFAULT_LR, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS).expect("defaults are valid")
    }

    /// One bias-corrected Adam update. The logit scale is only touched when the
    /// head's temperature is learnable, and is clamped afterwards.
    pub fn step(&mut self, head: &mut ProjectionHead, grads: &HeadGradients) -> Result<()> {
        if !grads.matches(head) || self.m.len() != head.num_parameters() {
            return Err(Error::Shape("gradients or optimizer state do not match the head".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let temperature_slot = self.m.len() - 1;
        let learnable = head.learnable_temperature;

        for (k, (param, g)) in head.parameters_mut().zip(grads.values()).enumerate() {
            if k == temperature_slot && !learnable {
                continue;
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *param -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        head.clamp_temperature();
        Ok(())
    }
}

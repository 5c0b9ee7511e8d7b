//! Adaptive-moment gradient descent and finite-difference gradient checks.

use serde::{Deserialize, Serialize};

/// Central finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Adam optimizer state for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`; `weight_decay` adds an L2 term
    /// `weight_decay·x` to the gradient.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_with_decay(params, grads, lr, 0.0)
    }

    pub fn step_with_decay(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub max_relative_deviation: f64,
    pub max_absolute_deviation: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Compare `analytic` with central finite differences of `f` at `x` using
/// step [`FD_STEP`]. Relative deviation is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> GradientReport {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut xp = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let mut report = GradientReport {
        max_relative_deviation: 0.0,
        max_absolute_deviation: 0.0,
        worst_index: 0,
        numeric: Vec::new(),
    };
    for i in 0..x.len() {
        xp[i] = x[i] + FD_STEP;
        let up = f(&xp);
        xp[i] = x[i] - FD_STEP;
        let down = f(&xp);
        xp[i] = x[i];
        let n = (up - down) / (2.0 * FD_STEP);
        numeric.push(n);
        let a = analytic[i];
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-6);
        if rel > report.max_relative_deviation {
            report.max_relative_deviation = rel;
            report.worst_index = i;
        }
        report.max_absolute_deviation = report.max_absolute_deviation.max(abs);
    }
    report.numeric = numeric;
    report
}

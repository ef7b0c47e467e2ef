//! Gradient-descent optimizers over [`Parameters`] containers.

use serde::{Deserialize, Serialize};

use crate::nn::{Matrix, Parameters};

/// Plain stochastic gradient descent with a fixed step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Sgd {
    pub fn step<P: Parameters>(&self, params: &mut P, grads: &P) {
        for ((_, p), (_, g)) in params.params_mut().into_iter().zip(grads.params()) {
            for (w, d) in p.data.iter_mut().zip(&g.data) {
                *w -= self.learning_rate * d;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    settings: AdamSettings,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

impl Adam {
    pub fn new<P: Parameters>(settings: AdamSettings, params: &P) -> Self {
        let first: Vec<Matrix> = params.params().iter().map(|(_, m)| m.zeros_like()).collect();
        Self {
            settings,
            second: first.clone(),
            first,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let s = self.settings;
        let grad_list = grads.params();
        let mut scale = 1.0;
        if s.clip_norm > 0.0 {
            let norm = grad_list
                .iter()
                .flat_map(|(_, g)| g.data.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > s.clip_norm {
                scale = s.clip_norm / norm;
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - s.beta1.powi(t);
        let c2 = 1.0 - s.beta2.powi(t);
        for (i, (_, p)) in params.params_mut().into_iter().enumerate() {
            let g = &grad_list[i].1;
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.data.len() {
                let gj = g.data[j] * scale;
                m.data[j] = s.beta1 * m.data[j] + (1.0 - s.beta1) * gj;
                v.data[j] = s.beta2 * v.data[j] + (1.0 - s.beta2) * gj * gj;
                let m_hat = m.data[j] / c1;
                let v_hat = v.data[j] / c2;
                p.data[j] -= s.learning_rate * m_hat / (v_hat.sqrt() + s.eps);
            }
        }
    }
}

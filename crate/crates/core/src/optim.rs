//! Adam with a three-stage (warmup / hold / decay) learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;

/// Linear warmup, constant hold, linear decay.
///
/// The rate starts at `init_scale * peak`, reaches `peak` after the warmup
/// fraction, stays there for the hold fraction and falls linearly to
/// `final_scale * peak` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriStageSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub init_scale: f64,
    pub final_scale: f64,
}

impl TriStageSchedule {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        Self {
            peak,
            total_steps,
            warmup_frac: 0.1,
            hold_frac: 0.4,
            init_scale: 0.01,
            final_scale: 0.05,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let s = step as f64;
        let warm = self.warmup_frac * total;
        let hold_end = warm + self.hold_frac * total;
        if s < warm {
            let f = s / warm;
            self.peak * (self.init_scale + (1.0 - self.init_scale) * f)
        } else if s < hold_end {
            self.peak
        } else {
            let f = ((s - hold_end) / (total - hold_end).max(1.0)).min(1.0);
            self.peak * (1.0 - (1.0 - self.final_scale) * f)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new(clip_norm: Option<f64>) -> Self {
        Self {
            clip_norm,
            ..Self::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that carries a gradient, then
    /// clears the gradients. Frozen parameters are never touched.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = params.grad_norm_sq().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = t.data_mut();
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            t.zero_grad();
        }
    }
}

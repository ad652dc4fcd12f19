use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero at the last step.
    #[default]
    Cosine,
    Constant,
}

/// Learning rate for 0-based optimizer `step` out of `total`.
pub fn lr_at(schedule: Schedule, base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (PI * progress).cos())
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay. Decay applies to
/// matrices only; scalars and vectors (temperatures, gains, scales) are not
/// pulled toward zero.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Element>(config: AdamWConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<T: Element>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: p.numel(),
                    right: g.numel(),
                });
            }
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                let w64 = w.f64();
                *w = T::of(w64 - lr * (update + decay * w64));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine_to_zero() {
        let lr = |s| lr_at(Schedule::Cosine, 1.0, s, 4, 14);
        assert_eq!(lr(0), 0.25);
        assert_eq!(lr(3), 1.0);
        assert_eq!(lr(4), 1.0);
        assert!((lr(9) - 0.5).abs() < 1e-12);
        assert!(lr(13) < 0.03);
        assert_eq!(lr_at(Schedule::Constant, 0.1, 50, 0, 10), 0.1);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::<f64>::new(vec![2], vec![3.0, 0.0]).unwrap(), Tensor::scalar(4.0)];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::<f64>::scalar(0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias-corrected first step is lr · sign(g) up to eps
        let mut w = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&w]);
        opt.step(&mut [&mut w], &[Tensor::new(vec![1], vec![-3.0]).unwrap()], 0.1).unwrap();
        assert!((w.data()[0] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn decay_skips_vectors() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut mat = Tensor::<f64>::new(vec![1, 1], vec![2.0]).unwrap();
        let mut vec1 = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let mut opt = AdamW::new(cfg, &[&mat, &vec1]);
        let zero = |s: Vec<usize>| Tensor::<f64>::zeros(s).unwrap();
        opt.step(&mut [&mut mat, &mut vec1], &[zero(vec![1, 1]), zero(vec![1])], 0.1).unwrap();
        assert!((mat.data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(vec1.data()[0], 2.0);
    }
}

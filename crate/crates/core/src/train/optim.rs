use serde::{Deserialize, Serialize};

use crate::nn::{Module, Param};

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`; steps past the end give
/// zero (with a warning).
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        if step > total {
            log::warn!("cosine_lr: step {step} beyond total {total}, clamping to 0");
        }
        return 0.0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay; moments kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, weight_decay: f64) -> Self {
        Self {
            cfg,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`, reading each parameter's
    /// `grad` scaled by `grad_scale`.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64, grad_scale: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params(&mut |p: &mut Param| {
            if m.len() <= idx {
                m.push(vec![0.0; p.len()]);
                v.push(vec![0.0; p.len()]);
            }
            let (mi, vi) = (&mut m[idx], &mut v[idx]);
            for j in 0..p.len() {
                let g = p.grad[j] as f64 * grad_scale;
                mi[j] = b1 * mi[j] + (1.0 - b1) * g;
                vi[j] = b2 * vi[j] + (1.0 - b2) * g * g;
                let mh = mi[j] / c1;
                let vh = vi[j] / c2;
                let w = p.value[j] as f64;
                p.value[j] = (w - lr * (mh / (vh.sqrt() + eps) + wd * w)) as f32;
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Param);

    impl Module for One {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0);
        }
        fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Vec<f32>)) {}
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 2e-4), 2e-4);
        assert_eq!(cosine_lr(10, 10, 2e-4), 0.0);
        assert!((cosine_lr(5, 10, 2e-4) - 1e-4).abs() < 1e-12);
        assert_eq!(cosine_lr(12, 10, 2e-4), 0.0);
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (plus decay).
        let mut p = One(Param::filled(2, 1.0));
        p.0.grad = vec![3.0, -0.5];
        let mut opt = AdamW::new(AdamWConfig::default(), 0.0);
        opt.step(&mut p, 0.1, 1.0);
        assert!((p.0.value[0] - 0.9).abs() < 1e-6 && (p.0.value[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = One(Param::filled(1, 5.0));
        let mut opt = AdamW::new(AdamWConfig::default(), 0.0);
        for _ in 0..500 {
            p.0.grad = vec![2.0 * p.0.value[0]];
            opt.step(&mut p, 0.05, 1.0);
        }
        assert!(p.0.value[0].abs() < 0.05);
    }
}

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Learning rate with linear warmup and an optional cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    /// When set, cosine-decay from `base` to 0 over this many steps.
    pub decay_steps: Option<usize>,
}

impl LrSchedule {
    pub fn constant_after_warmup(base: f64, warmup_steps: usize) -> Self {
        LrSchedule {
            base,
            warmup_steps,
            decay_steps: None,
        }
    }

    /// Rate for the `step`-th update (0-based).
    pub fn at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = match self.decay_steps {
            Some(total) if total > self.warmup_steps && step >= self.warmup_steps => {
                let frac = ((step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => 1.0,
        };
        self.base * warm * decay
    }
}

/// Adam with decoupled weight decay, restricted to one contiguous parameter range.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    range: Range<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamW {
    pub fn new(range: Range<usize>, weight_decay: f64) -> Self {
        let n = range.len();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            range,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Applies one update with learning rate `lr`. A zero rate leaves the
    /// parameters bit-identical.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, i) in self.range.clone().enumerate() {
            let g = grads[i];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let mhat = self.m[k] / b1t;
            let vhat = self.v[k] / b2t;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_constant() {
        let s = LrSchedule::constant_after_warmup(1.0, 4);
        assert_eq!(s.at(0), 0.25);
        assert_eq!(s.at(3), 1.0);
        assert_eq!(s.at(100), 1.0);
    }

    #[test]
    fn cosine_reaches_zero() {
        let s = LrSchedule {
            base: 2.0,
            warmup_steps: 0,
            decay_steps: Some(10),
        };
        assert_eq!(s.at(0), 2.0);
        assert!(s.at(10).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(0..2, 0.0);
        for _ in 0..2000 {
            let g = p.clone();
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn only_touches_its_range() {
        let mut p = vec![1.0, 1.0, 1.0];
        let mut opt = AdamW::new(1..2, 0.1);
        opt.step(&mut p, &[5.0, 5.0, 5.0], 0.1);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[2], 1.0);
        assert!(p[1] < 1.0);
    }
}

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warm-up; 0 disables it.
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
        }
    }
}

/// Linear warm-up multiplier `min(1, step / warmup)` for a 1-based step.
pub fn warmup_factor(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// AdamW with decoupled weight decay. Moment buffers follow the store's
/// registration order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            cfg,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let lr = c.lr * warmup_factor(self.step, c.warmup_steps);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_store(0.37);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s.iter().next().unwrap().value.data()[0], 0.37);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 at t = 1, so the update is lr / (1 + eps).
        let mut s = scalar_store(1.0);
        s.iter_mut().next().unwrap().grad.fill(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s);
        let p = s.iter().next().unwrap().value.data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        for _ in 0..200 {
            let p = s.iter().next().unwrap().value.data()[0];
            s.iter_mut().next().unwrap().grad.fill(2.0 * p);
            opt.step(&mut s);
        }
        assert!(s.iter().next().unwrap().value.data()[0].abs() < 1e-2);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(warmup_factor(1, 4), 0.25);
        assert_eq!(warmup_factor(4, 4), 1.0);
        assert_eq!(warmup_factor(9, 4), 1.0);
        assert_eq!(warmup_factor(3, 0), 1.0);
    }
}

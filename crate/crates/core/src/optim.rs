//! First-order optimizers operating on flattened parameter sets.

use serde::{Deserialize, Serialize};

use crate::nn::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    /// SGD with momentum 0.9 and cosine-annealed learning rate.
    SgdCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "gradient size mismatch");
        if lr == 0.0 {
            return;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut offset = 0;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |t| {
            for (k, p) in t.iter_mut().enumerate() {
                let i = offset + k;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += t.len();
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(num_params: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.velocity.len(), "gradient size mismatch");
        if lr == 0.0 {
            return;
        }
        let mut offset = 0;
        let mu = self.momentum;
        let vel = &mut self.velocity;
        params.visit_mut(&mut |t| {
            for (k, p) in t.iter_mut().enumerate() {
                let i = offset + k;
                vel[i] = mu * vel[i] + g[i];
                *p -= lr * vel[i];
            }
            offset += t.len();
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(SgdMomentum),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(num_params)),
            OptimizerKind::SgdCosine => Optimizer::Sgd(SgdMomentum::new(num_params, 0.9)),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads, lr),
            Optimizer::Sgd(s) => s.step(params, grads, lr),
        }
    }
}

/// `base * rate^floor(epoch / every)`.
pub fn step_decay(base: f64, rate: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * rate.powi((epoch / every) as i32)
}

/// Cosine annealing from `base` down to zero over `total` epochs.
pub fn cosine_annealing(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (epoch.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = array![1.0, -2.0];
        let g = array![0.5, -3.0];
        let mut opt = Adam::new(2);
        opt.step(&mut p, &g, 0.1);
        // bias correction makes the first update lr * sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p: Array1<f64> = array![3.0, -4.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g = &p * 2.0;
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = array![1.0, 2.0];
        let g = array![1.0, 1.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2);
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, array![1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::SgdCosine, 2);
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, array![1.0, 2.0]);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = array![1.0];
        let g = array![1.0];
        let mut opt = SgdMomentum::new(1, 0.9);
        opt.step(&mut p, &g, 0.1);
        opt.step(&mut p, &g, 0.1);
        // v1 = 1, v2 = 1.9
        assert!((p[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        assert_eq!(step_decay(0.001, 0.5, 20, 0), 0.001);
        assert_eq!(step_decay(0.001, 0.5, 20, 19), 0.001);
        assert_eq!(step_decay(0.001, 0.5, 20, 20), 0.0005);
        assert_eq!(step_decay(0.001, 0.5, 20, 45), 0.00025);
        assert_eq!(cosine_annealing(0.1, 0, 10), 0.1);
        assert!(cosine_annealing(0.1, 10, 10).abs() < 1e-15);
        assert!((cosine_annealing(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }
}

//! Optimizers and learning-rate schedules.

use crate::autograd::{Grads, ParamSet};
use crate::tensor::Tensor;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// SGD with classical momentum: `v ← μ·v + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(set: &ParamSet, lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        let velocity = set.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { lr, momentum, clip_norm, velocity }
    }

    pub fn step(&mut self, set: &mut ParamSet, grads: &Grads) {
        let mut dense = grads.dense_for(set);
        if let Some(c) = self.clip_norm {
            clip_global_norm(&mut dense, c);
        }
        for (id, g) in set.ids().collect::<Vec<_>>().into_iter().zip(dense) {
            let v = &mut self.velocity[id.0];
            for (vv, gg) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gg;
            }
            let lr = self.lr;
            for (p, vv) in set.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vv;
            }
        }
    }
}

/// Adam with bias correction; the learning rate is supplied per step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(set: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || set.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from already-accumulated dense gradients (one per parameter).
    pub fn step_dense(&mut self, set: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = set.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = set.get_mut(id).data_mut();
            for (((pp, mm), vv), gg) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * gg;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gg * gg;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *pp -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// `factor · d_model^{-1/2} · min(step^{-1/2}, step · warmup^{-3/2})`, step ≥ 1.
pub fn noam_rate(step: u64, d_model: usize, factor: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// batches without improving the exponentially smoothed loss.
#[derive(Debug, Clone)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
    pub smoothing: f64,
    smoothed: Option<f64>,
    best: f64,
    since_best: usize,
}

impl PlateauDecay {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, smoothing: 0.9, smoothed: None, best: f64::INFINITY, since_best: 0 }
    }

    /// Feeds one batch loss; returns the multiplier to apply to the rate now.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let s = match self.smoothed {
            Some(prev) => self.smoothing * prev + (1.0 - self.smoothing) * loss,
            None => loss,
        };
        self.smoothed = Some(s);
        if s < self.best {
            self.best = s;
            self.since_best = 0;
            1.0
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                self.since_best = 0;
                self.best = s;
                self.factor
            } else {
                1.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn noam_crossover_at_warmup() {
        let (d, f, w) = (64, 2.0, 400);
        let at = noam_rate(w, d, f, w);
        let want = f * (d as f64).powf(-0.5) * (w as f64).powf(-0.5);
        assert!((at - want).abs() < 1e-15);
        assert!(noam_rate(10, d, f, w) < at);
        assert!(noam_rate(4000, d, f, w) < at);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut gs = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])];
        let before = clip_global_norm(&mut gs, 1.0);
        assert_eq!(before, 5.0);
        assert!((gs[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_minimizes_quadratic() {
        let mut set = ParamSet::new("q");
        let id = set.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Sgd::new(&set, 0.05, 0.9, Some(5.0));
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&set, id);
            let sq = g.mul(x, x);
            let l = g.sum_all(sq);
            let grads = g.backward(l);
            opt.step(&mut set, &grads);
        }
        assert!(set.get(id).sq_norm() < 1e-6);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut p = PlateauDecay::new(0.9, 3);
        assert_eq!(p.observe(1.0), 1.0);
        assert_eq!(p.observe(2.0), 1.0);
        assert_eq!(p.observe(2.0), 1.0);
        assert_eq!(p.observe(2.0), 0.9);
    }
}

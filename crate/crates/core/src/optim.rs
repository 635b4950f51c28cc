//! Adam with a one-cycle learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::graph::Grads;
use crate::params::{ParamId, ParamStore};

/// Linear warm-up from `peak / 10` to `peak` over the first 30% of the
/// steps, then cosine decay to `peak / 1000`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        Self { peak_lr, total_steps, warmup_frac: 0.3, start_div: 10.0, final_div: 1000.0 }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let s = (step as f64).min(total);
        let warm = self.warmup_frac * total;
        let start = self.peak_lr / self.start_div;
        let floor = self.peak_lr / self.final_div;
        if s < warm {
            start + (self.peak_lr - start) * s / warm
        } else {
            let span = (total - warm).max(1.0);
            let p = (s - warm) / span;
            floor + (self.peak_lr - floor) * 0.5 * (1.0 + libm::cos(PI * p))
        }
    }
}

/// Per-parameter gradient sums over a mini-batch.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    sums: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self { sums: store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect() }
    }

    pub fn add(&mut self, grads: &Grads, weight: f64) {
        for (id, g) in grads.params() {
            for (s, v) in self.sums[id.index()].iter_mut().zip(g) {
                *s += weight * v;
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.sums[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.sums[id.index()]
    }

    pub fn zero(&mut self) {
        self.sums.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.sums.iter().flatten().map(|v| v * v).sum())
    }

    pub fn scale(&mut self, c: f64) {
        self.sums.iter_mut().flatten().for_each(|v| *v *= c);
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let data = store.tensor_mut(id).data_mut();
            for j in 0..data.len() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                data[j] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Adam driven by a [`OneCycle`] schedule.
#[derive(Clone, Debug)]
pub struct AdamOneCycle {
    pub adam: Adam,
    pub schedule: OneCycle,
}

impl AdamOneCycle {
    pub fn new(store: &ParamStore, peak_lr: f64, total_steps: usize) -> Self {
        Self { adam: Adam::new(store), schedule: OneCycle::new(peak_lr, total_steps) }
    }

    /// Apply one update at schedule position `step` and return the rate used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, step: usize) -> f64 {
        let lr = self.schedule.lr(step);
        self.adam.step(store, grads, lr);
        lr
    }
}

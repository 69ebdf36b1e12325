//! Adam, the warmup/hold/decay learning-rate schedule, and gradient buffers.

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Linear warmup to `peak_lr`, constant for `hold_steps`, then exponential decay.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub hold_steps: u64,
    /// Per-step multiplicative decay after the hold phase.
    pub decay_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Hold,
    Decay,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Hold => "hold",
            Phase::Decay => "decay",
        })
    }
}

impl LrSchedule {
    /// Values used for full-size models: 8000 warmup steps to 4e-5, 42000 hold steps.
    pub fn full_scale() -> Self {
        Self {
            warmup_steps: 8000,
            peak_lr: 4e-5,
            hold_steps: 42000,
            decay_rate: 0.9998,
        }
    }

    /// Defaults for desk-scale models, which stall at the full-size learning rate.
    pub fn toy() -> Self {
        Self {
            warmup_steps: 200,
            peak_lr: 3e-3,
            hold_steps: 2000,
            decay_rate: 0.9998,
        }
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step < self.warmup_steps {
            Phase::Warmup
        } else if step <= self.warmup_steps + self.hold_steps {
            Phase::Hold
        } else {
            Phase::Decay
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.phase(step) {
            Phase::Warmup => self.peak_lr * step as f64 / self.warmup_steps as f64,
            Phase::Hold => self.peak_lr,
            Phase::Decay => {
                let k = step - self.warmup_steps - self.hold_steps;
                self.peak_lr * self.decay_rate.powf(k as f64)
            }
        }
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.add(id, &g);
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.index()] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters without a gradient are left alone and their
    /// moments untouched. Any non-finite gradient aborts before anything changes.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

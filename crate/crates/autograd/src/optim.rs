use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamMask, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Learning-rate schedule evaluated per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Cosine decay from `lr` to `min_lr` over `total_steps`.
    Cosine { lr: f64, min_lr: f64, total_steps: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr, min_lr, total_steps } => {
                if total_steps <= 1 {
                    return lr;
                }
                let frac = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
                min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: Some(1.0) }
    }
}

/// Adam restricted to the parameters selected by `mask`.
pub struct Adam<T> {
    cfg: AdamConfig,
    schedule: LrSchedule,
    mask: ParamMask,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    step: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, mask: ParamMask, schedule: LrSchedule, cfg: AdamConfig) -> Self {
        let n = store.len();
        Self { cfg, schedule, mask, m: vec![None; n], v: vec![None; n], step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    pub fn mask(&self) -> &ParamMask {
        &self.mask
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut Grads<T>) -> f64 {
        let norm = match self.cfg.max_grad_norm {
            Some(max) => grads.clip_global_norm(T::from_f64_lossy(max)),
            None => grads.global_norm(),
        };
        let lr = self.schedule.at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let step_size = T::from_f64_lossy(lr / c1);
        let c2s = T::from_f64_lossy(c2.sqrt());
        let eps = T::from_f64_lossy(self.cfg.eps);
        for id in store.ids().collect::<Vec<_>>() {
            if !self.mask.contains(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for k in 0..p.len() {
                let gk = g.data()[k];
                let mk = b1t * m.data()[k] + (T::one() - b1t) * gk;
                let vk = b2t * v.data()[k] + (T::one() - b2t) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let denom = vk.sqrt() / c2s + eps;
                p.data_mut()[k] = p.data()[k] - step_size * mk / denom;
            }
        }
        norm.to_f64_lossy()
    }
}

/// Plain gradient descent, used by tests that need an analytically known step.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, grads: &Grads<T>, mask: &ParamMask, lr: T) {
    for id in store.ids().collect::<Vec<_>>() {
        if !mask.contains(id) {
            continue;
        }
        if let Some(g) = grads.get(id) {
            store.get_mut(id).axpy(-lr, g);
        }
    }
}

use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, TrainConfig};
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// Optimizer moments stored alongside parameters in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    /// Number of updates applied so far.
    pub updates: u64,
    /// SGD velocity, or Adam's first moment.
    pub first: ModelParams<S>,
    /// Adam's second moment.
    pub second: Option<ModelParams<S>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

pub fn global_norm<S: Scalar>(grad: &ModelParams<S>) -> f64 {
    let mut sq = 0.0f64;
    grad.for_each(|_, t| sq += t.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    sq.sqrt()
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, like: &ModelParams<S>) -> Self {
        let first = like.zeros_like();
        let second = (kind == OptimizerKind::Adam).then(|| like.zeros_like());
        Self { kind, updates: 0, first, second }
    }

    /// Clips `grad` to the configured global norm, then updates `params`.
    pub fn step(&mut self, params: &mut ModelParams<S>, grad: &mut ModelParams<S>, cfg: &TrainConfig) -> UpdateStats {
        let grad_norm = global_norm(grad);
        let clipped = cfg.gradient_clip_norm > 0.0 && grad_norm > cfg.gradient_clip_norm;
        if clipped {
            let s = S::from_f64(cfg.gradient_clip_norm / grad_norm);
            grad.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v *= s));
        }
        self.updates += 1;
        let lr = S::from_f64(cfg.learning_rate);
        let grads = grad.tensors_mut();
        let firsts = self.first.tensors_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                let mu = S::from_f64(cfg.momentum);
                for ((p, m), g) in params.tensors_mut().into_iter().zip(firsts).zip(grads) {
                    for ((w, m), &g) in p.data.iter_mut().zip(m.data.iter_mut()).zip(g.data.iter()) {
                        *m = mu * *m + g;
                        *w -= lr * *m;
                    }
                }
            }
            OptimizerKind::Adam => {
                let n = self.updates.min(i32::MAX as u64) as i32;
                let c1 = S::from_f64(1.0 - cfg.adam_beta1.powi(n));
                let c2 = S::from_f64(1.0 - cfg.adam_beta2.powi(n));
                let (b1, b2, eps) = (S::from_f64(cfg.adam_beta1), S::from_f64(cfg.adam_beta2), S::from_f64(cfg.adam_epsilon));
                let seconds = self.second.as_mut().expect("Adam keeps a second moment").tensors_mut();
                for (((p, m), v), g) in params.tensors_mut().into_iter().zip(firsts).zip(seconds).zip(grads) {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = b1 * m.data[i] + (S::ONE - b1) * gi;
                        v.data[i] = b2 * v.data[i] + (S::ONE - b2) * gi * gi;
                        p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        UpdateStats { grad_norm, clipped }
    }

    pub fn cast<T: Scalar>(&self) -> Optimizer<T> {
        Optimizer { kind: self.kind, updates: self.updates, first: self.first.cast(), second: self.second.as_ref().map(|s| s.cast()) }
    }
}

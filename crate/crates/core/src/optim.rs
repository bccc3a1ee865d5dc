//! Adam / AdamW, learning-rate schedules and global-norm gradient clipping.

use ndarray::Array2;

use crate::config::{LrSchedule, OptimizerKind};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Scales the gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

pub fn global_norm(grads: &[Option<Array2<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Learning rate for `epoch` (0-based) of a phase lasting `total` epochs.
pub fn scheduled_lr(base: f64, schedule: LrSchedule, epoch: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let t = epoch as f64 / total.max(1) as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
        }
        LrSchedule::Step { decay_every, factor } => base * factor.powi((epoch / decay_every.max(1)) as i32),
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Option<Array2<f64>>>,
    pub v: Vec<Option<Array2<f64>>>,
}

impl Adam {
    pub fn new(kind: OptimizerKind, weight_decay: f64, n_params: usize) -> Self {
        Self {
            kind,
            weight_decay,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::DimensionMismatch { expected: store.len(), got: grads.len() });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut store.params_mut()[i].value;
            let mut g = g.clone();
            if self.kind == OptimizerKind::Adam && self.weight_decay > 0.0 {
                g.zip_mut_with(p, |gi, &pi| *gi += self.weight_decay * pi);
            }
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(&g, |mi, &gi| *mi = BETA1 * *mi + (1.0 - BETA1) * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi);
            if self.kind == OptimizerKind::Adamw && self.weight_decay > 0.0 {
                p.mapv_inplace(|pi| pi * (1.0 - lr * self.weight_decay));
            }
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS));
        }
        Ok(())
    }
}

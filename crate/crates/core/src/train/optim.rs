//! Adam and the halve-on-plateau learning-rate rule.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::params::{Mat, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched and their moments are not decayed.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(validation(format!(
                "optimizer tracks {} parameters, got {} gradients for {}",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best: f64,
    /// Consecutive epochs without an improvement larger than `tolerance`.
    pub stale: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub factor: f64,
}

impl PlateauState {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
            patience,
            tolerance,
            factor: 0.5,
        }
    }
}

/// Feeds one epoch-mean loss into the schedule and returns the new rate.
pub fn lr_on_plateau(state: &mut PlateauState, epoch_loss: f64, lr: f64) -> f64 {
    if epoch_loss < state.best - state.tolerance {
        state.best = epoch_loss;
        state.stale = 0;
        return lr;
    }
    state.stale += 1;
    if state.stale >= state.patience {
        state.stale = 0;
        lr * state.factor
    } else {
        lr
    }
}

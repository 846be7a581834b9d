//! Adam with decoupled weight decay, step-decay schedule and global-norm
//! clipping.

use crate::tensor::{Gradients, ParamStore};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.values.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies `θ ← θ(1 − lr·λ)` followed by a bias-corrected Adam update
    /// to every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        if self.m.len() != store.len() || grads.len() != store.len() {
            return Err(Error::Internal("optimizer state does not match parameters".into()));
        }
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::numeric(
                store.get(id).name.clone(),
                "non-finite gradient entry",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let shrink = 1.0 - lr * weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, theta) in store.values_mut(id).iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
                let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
                *theta = (*theta as f64 * shrink - update) as f32;
            }
        }
        Ok(())
    }
}

/// `lr · factor^floor(epoch / every)`.
pub fn step_decay(lr: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    lr * factor.powi((epoch / every.max(1)) as i32)
}

/// Rescales `grads` to global norm `max_norm` when it is larger and returns
/// the norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

use std::collections::BTreeSet;

use ndarray::{Array2, Zip};

use super::{Model, ModelConfig};
use crate::params::{Gradients, ParamKind, ParamStore};
use crate::{Error, Real, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Names of the parameters trained in `stage`: the projector alone in
/// stage 1; everything except the frozen patch embedder in stage 2.
pub fn freeze_mask(stage: u8, config: &ModelConfig) -> Result<BTreeSet<String>> {
    let model = Model::<f32>::new(config.clone(), 0)?;
    trainable_names(stage, model.store.names())
}

pub(crate) fn trainable_names<'a>(
    stage: u8,
    names: impl Iterator<Item = &'a str>,
) -> Result<BTreeSet<String>> {
    let keep: fn(&str) -> bool = match stage {
        1 => |n| n.starts_with("projector."),
        2 => |n| !n.starts_with("vision."),
        _ => {
            return Err(Error::Argument(format!(
                "training stage must be 1 or 2, got {stage}"
            )))
        }
    };
    Ok(names.filter(|n| keep(n)).map(str::to_string).collect())
}

/// Cosine decay from `lr_init` at step 0 to `lr_end` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, lr_init: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr_end + 0.5 * (lr_init - lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay restricted to linear projections.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Array2<T>>>,
    v: Vec<Option<Array2<T>>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient. Non-finite gradients
    /// abort the step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(store.entry(id).name.clone()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (id, g) in grads.iter() {
            let i = id.index();
            let decay = store.entry(id).kind == ParamKind::Linear && self.weight_decay != 0.0;
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let p = store.get_mut(id);
            if decay {
                let keep = T::of(1.0 - lr * self.weight_decay);
                p.mapv_inplace(|x| x * keep);
            }
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p - step * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

//! Cosine schedule and AdamW with two parameter groups.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::encoders::is_lm_param;
use crate::tensor::{Matrix, ParamStore};

/// `peak · ½ (1 + cos(π · step / total))`, zero past the end.
pub fn lr_at(step: usize, total_steps: usize, peak: f64) -> f64 {
    if total_steps == 0 || step > total_steps {
        return 0.0;
    }
    peak * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// Biases and layer-norm parameters are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !(last == "g" || last.starts_with('b'))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates and per-tensor update counts. Tensors that received no
/// gradient in a step are left untouched, including their counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub m: ParamStore,
    pub v: ParamStore,
    pub counts: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. `lr_for` gives the learning rate of a parameter's group.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Matrix>,
        hyper: &AdamHyper,
        lr_for: impl Fn(&str) -> f64,
    ) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let lr = lr_for(name);
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Matrix::zeros(g.dim()));
                self.v.insert(name.clone(), Matrix::zeros(g.dim()));
            }
            let t = self.counts.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - hyper.beta1.powi(*t as i32);
            let c2 = 1.0 - hyper.beta2.powi(*t as i32);
            let m = self.m.get_mut(name).expect("moment exists");
            m.zip_mut_with(g, |m, &g| *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g);
            let v = self.v.get_mut(name).expect("moment exists");
            v.zip_mut_with(g, |v, &g| *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g);
            if decays(name) {
                p.mapv_inplace(|x| x * (1.0 - lr * hyper.weight_decay));
            }
            let m = self.m.get(name).expect("moment exists");
            let v = self.v.get(name).expect("moment exists");
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + hyper.eps);
            });
        }
    }
}

/// LM parameters train at `lr_lm`, everything else at `lr_other`.
pub fn group_lr(name: &str, lr_lm: f64, lr_other: f64) -> f64 {
    if is_lm_param(name) {
        lr_lm
    } else {
        lr_other
    }
}

//! AdamW with decoupled weight decay and the warmup learning-rate schedule.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-2,
            epochs: 100,
            steps_per_epoch: 10,
            batch_size: 24,
            warmup_fraction: 0.1,
            max_grad_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            problems.push(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            problems.push("batch_size and steps_per_epoch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            problems.push("betas must lie in [0, 1) and eps be positive".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                problems.push(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Linear warmup from 0 over the first `warmup_fraction · total_steps`
/// steps, constant afterwards.
pub fn lr_schedule(step: usize, total_steps: usize, config: &OptimConfig) -> f64 {
    let warm = config.warmup_fraction * total_steps as f64;
    if warm <= 0.0 || step as f64 >= warm {
        config.learning_rate
    } else {
        config.learning_rate * step as f64 / warm
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    moments: BTreeMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(config: &OptimConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter with a gradient; frozen parameters are
    /// never touched even if a gradient is supplied.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Array2<f64>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let p = params.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            });
        }
    }

    /// Moments as named tensors (`adam.m.<param>`, `adam.v.<param>`) plus the step count.
    pub fn export(&self, params: &ParamStore) -> Vec<(String, Array2<f64>)> {
        let mut out = vec![("adam.t".to_string(), Array2::from_elem((1, 1), self.t as f64))];
        for (id, (m, v)) in &self.moments {
            let name = &params.get(*id).name;
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    pub fn import(config: &OptimConfig, params: &ParamStore, tensors: &[(String, Array2<f64>)]) -> Result<Self> {
        let mut opt = Self::new(config);
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for (name, value) in tensors {
            if name == "adam.t" {
                opt.t = value[[0, 0]].round() as u64;
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                ms.insert(p.to_string(), value.clone());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                vs.insert(p.to_string(), value.clone());
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer tensor '{name}'")));
            }
        }
        for (name, m) in ms {
            let v = vs.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing second moment for '{name}'")))?;
            let id = params.id(&name).ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown '{name}'")))?;
            opt.moments.insert(id, (m, v));
        }
        Ok(opt)
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [(ParamId, Array2<f64>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn schedule_examples() {
        let c = OptimConfig::default();
        assert_eq!(lr_schedule(0, 1000, &c), 0.0);
        assert_eq!(lr_schedule(100, 1000, &c), 5e-5);
        assert!((lr_schedule(50, 1000, &c) - 2.5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(1000, 1000, &c), 5e-5);
        // continuity at the knee and monotone warmup
        let mut prev = 0.0;
        for s in 0..=1000 {
            let lr = lr_schedule(s, 1000, &c);
            assert!(lr >= prev && lr - prev <= 5e-5 / 100.0 + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let c = OptimConfig { weight_decay: 0.1, ..OptimConfig::default() };
        let mut store = ParamStore::new();
        let id = store.insert("w", ParamKind::Lora, Array2::from_elem((1, 1), 2.0));
        let frozen = store.insert("f", ParamKind::Backbone, Array2::from_elem((1, 1), 3.0));
        store.set_trainable(frozen, false);
        let mut opt = AdamW::new(&c);
        let g = Array2::from_elem((1, 1), 0.5);
        opt.step(&mut store, &[(id, g.clone()), (frozen, g)], 0.01);
        // first step: m̂ = g, v̂ = g², update = g/(|g| + eps) ≈ 1
        let expect = 2.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 0.1 * 2.0);
        assert!((store.value(id)[[0, 0]] - expect).abs() < 1e-15);
        assert_eq!(store.value(frozen)[[0, 0]], 3.0);
        let exported = opt.export(&store);
        let back = AdamW::import(&c, &store, &exported).unwrap();
        assert_eq!(back.t, 1);
        assert_eq!(back.moments.len(), 1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![(ParamId(0), Array2::from_elem((1, 2), 3.0)), (ParamId(1), Array2::from_elem((1, 1), 4.0))];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 34f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}

//! Named parameter storage shared by the model, adapters, optimizer and checkpoints.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Role of a parameter; drives default freezing and checkpoint sections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Tokenizer,
    Backbone,
    CameraToken,
    ThermalAdapter,
    Head,
    Lora,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array2<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, kind, value, trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Per-forward mapping from parameters to graph leaves.
pub struct Bindings {
    vars: Vec<Option<Var>>,
    force_grad: bool,
}

impl Bindings {
    pub fn new(store: &ParamStore) -> Self {
        Self { vars: vec![None; store.len()], force_grad: false }
    }

    /// Every parameter is treated as requiring a gradient (used by gradient checks).
    pub fn with_all_grads(store: &ParamStore) -> Self {
        Self { vars: vec![None; store.len()], force_grad: true }
    }

    pub fn bind(&mut self, graph: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if id.0 >= self.vars.len() {
            self.vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = store.get(id);
        let v = graph.leaf(p.value.clone(), p.trainable || self.force_grad);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of bound parameters, keyed by parameter id.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<(ParamId, Array2<f64>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

/// Uniform `U(-bound, bound)` with `bound = 1/sqrt(fan_in)`: Kaiming-uniform with `a = sqrt(5)`.
pub fn kaiming_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn normal_init(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = rand_distr::Normal::new(0.0, std).expect("std must be positive");
    Array2::from_shape_fn((rows, cols), |_| rng.sample(dist))
}

use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::NumError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. Buffers (e.g. running statistics) are
/// stored alongside trainable parameters but never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of model parameters with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId, NumError> {
        if self.by_name.contains_key(name) {
            return Err(NumError::Parameter(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, NumError> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId, NumError> {
        self.insert(name, value, false)
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), NumError> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| NumError::Parameter(format!("missing parameter {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(NumError::Shape {
                    op: "load_from",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Running-statistic update queued by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// One forward pass: a fresh tape bound to a read-only parameter store.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    leaves: HashMap<ParamId, Var>,
    pub train: bool,
    pub updates: Vec<BufferUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            leaves: HashMap::new(),
            train,
            updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf for a parameter, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.leaves.insert(id, v);
        v
    }

    /// Gradient of every store entry (zero where unreachable or non-trainable).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .iter()
            .map(|(id, p)| match self.leaves.get(&id) {
                Some(&v) if p.trainable => grads.get_or_zeros(v),
                _ => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }

    pub fn into_updates(self) -> Vec<BufferUpdate> {
        self.updates
    }
}

/// Applies queued running-stat updates (exponential moving average).
pub fn apply_buffer_updates(store: &mut ParamStore, updates: &[BufferUpdate]) {
    for u in updates {
        let m = store.value_mut(u.mean).data_mut();
        for (r, b) in m.iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - u.momentum) * *r + u.momentum * b;
        }
        let v = store.value_mut(u.var).data_mut();
        for (r, b) in v.iter_mut().zip(&u.batch_var) {
            *r = (1.0 - u.momentum) * *r + u.momentum * b;
        }
    }
}

//! Named parameter storage and binding of parameters into a graph.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{s, Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat list of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Number of entries in parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match exactly.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        if map.len() != self.names.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: expected {}, found {}",
                self.names.len(),
                map.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = map
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Helper for registering freshly initialised parameters under a name prefix.
pub struct Init<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scoped<O>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> O) -> O {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::ones(shape))
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(shape, -a, a, self.rng);
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::<T>::randn(shape, self.rng).map(|v| v * s::<T>(std));
        let n = self.full_name(name);
        self.store.add(n, t)
    }
}

/// Binds parameters of a store into one graph as leaves, at most once each.
pub struct Session<'g, 's, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<usize>>>,
    frozen: Cell<bool>,
    trainable: RefCell<Vec<bool>>,
}

impl<'g, 's, T: Scalar> Session<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Session {
            graph,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            frozen: Cell::new(false),
            trainable: RefCell::new(vec![true; store.len()]),
        }
    }

    /// Marks parameters as permanently non-trainable for this session.
    pub fn freeze(&self, ids: impl IntoIterator<Item = ParamId>) {
        let mut tr = self.trainable.borrow_mut();
        for id in ids {
            tr[id.0] = false;
        }
    }

    /// Runs `f` with every parameter access treated as a constant.
    pub fn with_frozen<O>(&self, frozen: bool, f: impl FnOnce() -> O) -> O {
        let prev = self.frozen.replace(frozen || self.frozen.get());
        let out = f();
        self.frozen.set(prev);
        out
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    /// Graph variable for parameter `id`.
    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        if self.frozen.get() || !self.trainable.borrow()[id.0] {
            return self.graph.constant(self.store.get(id).clone());
        }
        let mut bound = self.bound.borrow_mut();
        if let Some(node) = bound[id.0] {
            return self.graph.var(node);
        }
        let v = self.graph.leaf(self.store.get(id).clone());
        bound[id.0] = Some(v.id());
        v
    }

    /// Uses `v` for parameter `id` instead of a fresh leaf.
    pub fn bind(&self, id: ParamId, v: Var<'g, T>) -> Result<()> {
        if v.shape() != self.store.get(id).shape() {
            return Err(Error::Shape(format!(
                "binding {:?} to parameter {} of shape {:?}",
                v.shape(),
                self.store.name(id),
                self.store.get(id).shape()
            )));
        }
        self.bound.borrow_mut()[id.0] = Some(v.id());
        Ok(())
    }

    /// Gradient for each parameter, zero where the parameter never took part.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.store
            .tensors()
            .iter()
            .zip(bound.iter())
            .map(|(t, b)| {
                b.and_then(|id| grads.get_id(id))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    /// Which parameters received a gradient-carrying leaf.
    pub fn touched(&self) -> Vec<bool> {
        self.bound.borrow().iter().map(|b| b.is_some()).collect()
    }
}

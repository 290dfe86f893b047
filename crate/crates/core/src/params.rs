//! Named parameter storage and graph binding.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    /// False for running state such as power-iteration vectors.
    pub trainable: bool,
}

/// Insertion-ordered map of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let (idx, old) = self
            .entries
            .insert_full(name.into(), Param { tensor, trainable });
        debug_assert!(old.is_none(), "duplicate parameter name");
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .unwrap()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mark every entry as non-trainable.
    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|p| p.trainable = false);
    }

    /// Fingerprint over every entry, trainable or not.
    pub fn fingerprint_all(&self) -> u64 {
        self.entries
            .values()
            .fold(0u64, |h, p| h.rotate_left(7) ^ p.tensor.fingerprint())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Combined bitwise fingerprint of every trainable tensor.
    pub fn fingerprint(&self) -> u64 {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .fold(0u64, |h, (_, p)| h.rotate_left(7) ^ p.tensor.fingerprint())
    }

    /// Overwrite values from `(name, tensor)` pairs; every stored name must be present.
    pub fn load_from<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let t = lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}

/// Normal(0, std) initialization.
pub fn normal_init(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Binds stored parameters into a graph, at most once per parameter.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
    cache: HashMap<(usize, u8), Var>,
}

impl<'s> Binder<'s> {
    /// Parameters become gradient-carrying leaves.
    pub fn train(store: &'s ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    /// Parameters become constants.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable,
            cache: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable && self.store.is_trainable(id) {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Use an existing node in place of a stored parameter.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = Some(v);
    }

    /// Memoize a derived node (such as a normalized weight) keyed by a parameter.
    pub fn cached(
        &mut self,
        id: ParamId,
        tag: u8,
        make: impl FnOnce(&mut Self) -> Result<Var>,
    ) -> Result<Var> {
        if let Some(&v) = self.cache.get(&(id.0, tag)) {
            return Ok(v);
        }
        let v = make(self)?;
        self.cache.insert((id.0, tag), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter.
    pub fn collect(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

//! Named parameter storage.
//!
//! A [`ParamStore`] either owns weight values (a *materialised* store) or
//! only their shapes (a *meta* store). Meta stores let the reference WaSR
//! graph, whose weights would need gigabytes, be built and costed without
//! allocating anything.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
    value: Option<Arc<Tensor>>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.numel()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
    meta: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that records shapes only.
    pub fn meta() -> Self {
        Self {
            meta: true,
            ..Self::default()
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Value of a parameter; a shape-only placeholder in meta stores.
    pub fn value(&self, id: ParamId) -> Arc<Tensor> {
        match &self.entries[id.0].value {
            Some(v) => Arc::clone(v),
            None => Arc::new(Tensor::meta(self.entries[id.0].shape)),
        }
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.shape() != e.shape {
            return Err(shape_err!(
                "parameter {} expects {}, got {}",
                e.name,
                e.shape,
                value.shape()
            ));
        }
        if self.meta {
            return Err(config_err!("cannot assign values in a shape-only store"));
        }
        e.value = Some(Arc::new(value));
        Ok(())
    }

    /// Sets a parameter from a flat slice.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let shape = self.entries[id.0].shape;
        self.set(id, Tensor::from_vec(shape, values.to_vec())?)
    }

    pub fn set_by_name(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let id = self.find(name).ok_or_else(|| config_err!("no parameter named {name}"))?;
        self.set_values(id, values)
    }

    /// Applies `f` to the value of a parameter in place.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut [f64])) {
        if let Some(v) = self.entries[id.0].value.as_mut() {
            f(Arc::make_mut(v).data_mut());
        }
    }

    /// Sets every value of every parameter under `prefix` to `v`.
    pub fn fill_under(&mut self, prefix: &str, v: f64) {
        let ids: Vec<ParamId> = self.ids().filter(|&id| under(&self.entries[id.0].name, prefix)).collect();
        for id in ids {
            self.update(id, |d| d.fill(v));
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.numel()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable() && under(&e.name, prefix))
            .map(|e| e.numel())
            .sum()
    }

    /// Sum of squares of all trainable values.
    pub fn trainable_sq_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .filter_map(|e| e.value.as_ref())
            .map(|v| v.sum_sq())
            .sum()
    }

    fn push(&mut self, name: String, shape: Shape, kind: ParamKind, value: Option<Tensor>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape,
            kind,
            value: value.map(Arc::new),
        });
        id
    }
}

/// True if `name` equals `prefix` or lies in its `prefix.` namespace.
pub fn under(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Creates parameters under a hierarchical name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.path(name),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn is_meta(&self) -> bool {
        self.store.meta
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        let value = (!self.store.meta).then(|| {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let data = (0..shape.numel()).map(|_| normal.sample(&mut *self.rng)).collect();
            Tensor::from_parts(shape, data)
        });
        self.store.push(self.path(name), shape, ParamKind::Weight, value)
    }

    pub fn constant(&mut self, name: &str, shape: Shape, kind: ParamKind, v: f64) -> ParamId {
        let value = (!self.store.meta).then(|| Tensor::full(shape, v));
        self.store.push(self.path(name), shape, kind, value)
    }

    /// Draws a fresh seed for a nested component.
    pub fn fork_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Deterministic generator used for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_nest_and_resolve() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(1);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let id = {
            let mut enc = b.sub("encoder");
            let mut l1 = enc.sub("layer1");
            l1.he_normal("conv.weight", Shape::new(4, 2, 3, 3), 18)
        };
        assert_eq!(store.find("encoder.layer1.conv.weight"), Some(id));
        assert_eq!(store.num_trainable_under("encoder"), 72);
        assert_eq!(store.num_trainable_under("enc"), 0);
    }

    #[test]
    fn meta_store_allocates_nothing() {
        let mut store = ParamStore::meta();
        let mut rng = init_rng(1);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let id = b.he_normal("w", Shape::new(2048, 2048, 3, 3), 9 * 2048);
        assert!(store.value(id).is_meta());
        assert_eq!(store.num_trainable(), 2048 * 2048 * 9);
    }

    #[test]
    fn he_init_is_seeded() {
        let make = |seed| {
            let mut store = ParamStore::new();
            let mut rng = init_rng(seed);
            let id = ParamBuilder::new(&mut store, &mut rng).he_normal("w", Shape::new(8, 8, 1, 1), 8);
            store.value(id).data().to_vec()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3), make(4));
    }
}

use std::collections::HashMap;

use crate::real::Real;
use crate::tensor::Tensor;
use crate::{AutogradError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors. A name's first dotted segment is its
/// component (`backbone.layer0.wq` belongs to `backbone`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutogradError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Distinct component names in insertion order.
    pub fn components(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            let c = component_of(n);
            if !out.iter().any(|o| o == c) {
                out.push(c.to_string());
            }
        }
        out
    }

    pub fn component_ids(&self, component: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, n, _)| component_of(n) == component).map(|(id, _, _)| id).collect()
    }

    /// Mask selecting every parameter of the listed components.
    pub fn mask(&self, components: &[&str]) -> ParamMask {
        ParamMask(self.names.iter().map(|n| components.contains(&component_of(n))).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites every parameter of `component` with the same-named tensor from `other`.
    pub fn copy_component_from(&mut self, other: &ParamStore<T>, component: &str) -> Result<()> {
        for id in self.component_ids(component) {
            let name = self.names[id.0].clone();
            let src = other.id(&name).ok_or_else(|| AutogradError::MissingParam(name.clone()))?;
            let v = other.get(src);
            if v.shape() != self.values[id.0].shape() {
                return Err(AutogradError::Shape(format!("shape mismatch copying {name}")));
            }
            self.values[id.0] = v.clone();
        }
        Ok(())
    }

    /// Copies `src_component.*` tensors into `dst_component.*` with matching suffixes.
    pub fn copy_component_renamed(&mut self, src_component: &str, dst_component: &str) -> Result<()> {
        for id in self.component_ids(dst_component) {
            let suffix = self.names[id.0][dst_component.len()..].to_string();
            let src_name = format!("{src_component}{suffix}");
            let src = self.id(&src_name).ok_or(AutogradError::MissingParam(src_name))?;
            self.values[id.0] = self.values[src.0].clone();
        }
        Ok(())
    }
}

/// Which parameters receive gradients in a graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask(pub Vec<bool>);

impl ParamMask {
    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    #[inline]
    pub fn contains(&self, id: ParamId) -> bool {
        self.0.get(id.0).copied().unwrap_or(false)
    }

    pub fn union(&self, other: &ParamMask) -> ParamMask {
        ParamMask(self.0.iter().zip(&other.0).map(|(a, b)| *a || *b).collect())
    }
}

/// Per-parameter gradient accumulators.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(len: usize) -> Self {
        Self { slots: vec![None; len] }
    }

    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self::new(store.len())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.is_finite())
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn nonzero_ids(&self) -> Vec<ParamId> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, g)| g.as_ref().is_some_and(|g| g.data().iter().any(|v| *v != T::zero())))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn clear(&mut self) {
        for s in self.slots.iter_mut() {
            *s = None;
        }
    }
}

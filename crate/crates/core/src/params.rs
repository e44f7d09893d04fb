//! Named storage for trainable parameters and non-trainable buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Trainable weight; receives gradients and is counted by the profiler.
    Param,
    /// State such as batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T: Scalar> {
    pub name: String,
    pub kind: Kind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: Kind, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(kind == Kind::Param);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    /// Ids of trainable parameters, in registration order.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].kind == Kind::Param).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == Kind::Param).map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.cast::<U>();
                t.set_requires_grad(e.kind == Kind::Param);
                Entry { name: e.name.clone(), kind: e.kind, tensor: t }
            })
            .collect();
        ParamStore { entries, index: self.index.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Kind::Param, Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a", Kind::Buffer, Tensor::zeros(&[2])).is_err());
        assert_eq!(s.num_trainable(), 2);
    }
}

use std::collections::HashMap;

use super::{AutogradError, Real, Tensor};

/// Handle to a tensor held by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable; bound to tapes with `requires_grad`.
    Param,
    /// Non-trainable state such as batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<R> {
    pub name: String,
    pub kind: EntryKind,
    pub tensor: Tensor<R>,
}

/// Named arena of parameters and buffers shared by every network in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    entries: Vec<Entry<R>>,
    by_name: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, kind: EntryKind, tensor: Tensor<R>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            tensor: tensor.with_requires_grad(kind == EntryKind::Param),
        });
        ParamId(id)
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor<R>) -> ParamId {
        self.insert(name, EntryKind::Param, tensor)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<R>) -> ParamId {
        self.insert(name, EntryKind::Buffer, tensor)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.entries[id.0].kind
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry<R>] {
        &self.entries
    }

    /// Ids of trainable entries whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Param && e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Overwrites the value of `name`, checking the shape.
    pub fn load_value(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<R>,
    ) -> Result<(), AutogradError> {
        let id = self
            .lookup(name)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))?;
        let t = &mut self.entries[id.0].tensor;
        if t.shape() != shape {
            return Err(AutogradError::ShapeMismatch {
                op: "load_value",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Total number of trainable scalars whose name starts with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.params_with_prefix(prefix)
            .into_iter()
            .map(|id| self.get(id).numel())
            .sum()
    }
}

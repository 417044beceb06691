use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Gradients, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether an entry is optimized or only carried along (batchnorm running
/// statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    pub kind: ParamKind,
}

/// Named collection of model parameters and buffers, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a trainable weight.
    pub fn add_weight(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false, ParamKind::Buffer)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, requires_grad: bool, kind: ParamKind) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad,
            kind,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        let p = &mut self.params[id.0];
        p.requires_grad = flag && p.kind == ParamKind::Weight;
    }

    /// Ids of entries that currently receive gradients.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total element count over weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Adds the parameter gradients recorded in `grads` to each entry's
    /// `grad` buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Dimension(format!(
                "{}: expected shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and values of every entry whose name
    /// starts with `prefix` (empty prefix hashes everything).
    pub fn digest(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

use indexmap::IndexMap;

use crate::error::{LslaError, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Ordered table of named parameter tensors. Insertion order is the
/// canonical order for checkpoints, optimizer state and gradient reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

/// Parameter names bound to leaves of one [`Tape`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| LslaError::ParamMismatch(format!("no parameter named {name}")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(LslaError::ParamMismatch(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LslaError::ParamMismatch(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| LslaError::ParamMismatch(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t)))
                .collect(),
        }
    }

    /// Adds the tape's gradients for every bound parameter into the tensors'
    /// gradient buffers. Parameters the target did not reach get zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let var = bound.get(name)?;
            match tape.grad(var) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }
}

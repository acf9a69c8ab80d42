use std::ops::Index;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tracked leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.var(t.clone())).collect(),
        }
    }

    /// Records every parameter as an untracked constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let id = other
                .find(name)
                .ok_or_else(|| Error::Format(format!("parameter {name} missing from source")))?;
            let src = other.get(id);
            if src.shape() != t.shape() {
                return Err(Error::shape("load parameter", t.shape(), src.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameters bound to one tape.
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn empty() -> Self {
        Self { vars: Vec::new() }
    }

    /// One gradient per parameter, zero where a parameter did not influence the root.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

impl<'t> Index<ParamId> for ParamVars<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

//! Named parameter storage.
//!
//! Names follow the archive scheme (`layer{L}.head{H}.wq` and so on) so a
//! store can be written to and read from an MHW archive without translation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// What a slot belongs to; drives freeze masks and import restrictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Token embedders, timestep table and the embedding layer norm.
    Embedding,
    /// Layer norm in front of the attention sublayer.
    AttentionNorm,
    /// Per-head projections plus the shared output projection.
    Attention,
    Gate,
    /// Layer norm in front of the feed-forward sublayer, and the sublayer itself.
    FeedForward,
    FinalNorm,
    ActionHead,
    /// Not trained; state normalization statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    roles: Vec<ParamRole>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            roles: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, role: ParamRole, t: Tensor) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.roles.push(role);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn role_of(&self, name: &str) -> Option<ParamRole> {
        self.id(name).map(|i| self.roles[i])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    /// Replaces a slot's value; the shape must match exactly.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::shape("set parameter", self.tensors[i].shape(), value.shape()));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

pub fn head_param_name(layer: usize, head: usize, which: &str) -> String {
    format!("layer{layer}.head{head}.{which}")
}

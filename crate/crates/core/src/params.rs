//! Named parameter storage.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Injected parameter groups that a training stage can unfreeze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    VisionAdapter,
    TextAdapter,
    AttnAdapter,
    Gate,
    Projection,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::VisionAdapter,
        Group::TextAdapter,
        Group::AttnAdapter,
        Group::Gate,
        Group::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::VisionAdapter => "a_v",
            Group::TextAdapter => "a_t",
            Group::AttnAdapter => "a_attn",
            Group::Gate => "gate",
            Group::Projection => "proj",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Weights of the base transformer.
    Base,
    Injected(Group),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: Role,
    /// Layer index for per-layer parameters.
    pub layer: Option<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn is_base(&self) -> bool {
        self.role == Role::Base
    }

    pub fn group(&self) -> Option<Group> {
        match self.role {
            Role::Base => None,
            Role::Injected(g) => Some(g),
        }
    }

    /// Weight decay applies to matrices only, and never to gates.
    pub fn decays(&self) -> bool {
        self.value.is_matrix() && self.group() != Some(Group::Gate)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, role: Role, layer: Option<usize>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            role,
            layer,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

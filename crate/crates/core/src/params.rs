//! Named parameter storage shared by every model component.

use std::collections::HashSet;
use std::ops::Index;

use crate::error::{HhftError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for; drives initialization and the dense/embedding
/// split of the parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
    /// Last projection of a residual branch (attention output, FFN second layer).
    ResidualWeight,
    ResidualBias,
}

impl ParamRole {
    pub fn is_embedding(self) -> bool {
        self == ParamRole::Embedding
    }
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
    names: HashSet<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCount {
    pub dense: usize,
    pub embedding: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.dense + self.embedding
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a zero-initialized parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], role: ParamRole) -> ParamId {
        let name = name.into();
        assert!(self.names.insert(name.clone()), "duplicate parameter name {name}");
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            role,
        });
        self.values.push(Tensor::zeros(shape));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let spec = &self.specs[id.0];
        if value.shape() != spec.shape.as_slice() {
            return Err(HhftError::Checkpoint {
                field: spec.name.clone(),
                message: format!("expected shape {:?}, got {:?}", spec.shape, value.shape()),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| HhftError::Config(format!("no parameter named {name}")))?;
        self.set(id, value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn count(&self) -> ParamCount {
        let mut count = ParamCount::default();
        for (spec, value) in self.specs.iter().zip(&self.values) {
            if spec.role.is_embedding() {
                count.embedding += value.len();
            } else {
                count.dense += value.len();
            }
        }
        count
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn register(&self, tape: &Tape) -> ParamVars {
        ParamVars(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Puts every parameter on the tape as a constant (inference only).
    pub fn register_frozen(&self, tape: &Tape) -> ParamVars {
        ParamVars(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Wraps vars already on a tape, in [`ParamId`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn all(&self) -> &[Var] {
        &self.0
    }

    pub fn collect(&self, ids: impl IntoIterator<Item = ParamId>) -> Vec<Var> {
        ids.into_iter().map(|id| self.0[id.0]).collect()
    }
}

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumError, Shape, Tensor};

/// Whether an optimizer may touch a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Frozen,
    Adaptable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub role: ParamRole,
    pub value: Tensor,
}

/// Named parameter tensors, each flagged frozen or adaptable.
///
/// Every name carries exactly one role, so the partition is exhaustive and
/// disjoint by construction. Iteration order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) {
        self.params.insert(name.into(), Param { role, value });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn role(&self, name: &str) -> Option<ParamRole> {
        self.params.get(name).map(|p| p.role)
    }

    pub fn is_adaptable(&self, name: &str) -> bool {
        self.role(name) == Some(ParamRole::Adaptable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn adaptable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, p)| p.role == ParamRole::Adaptable)
            .map(|(k, p)| (k, &p.value))
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, p)| p.role == ParamRole::Frozen)
            .map(|(k, p)| (k, &p.value))
    }

    /// A copy of this set with every parameter flagged adaptable (supervised training).
    pub fn all_adaptable(&self) -> ParamSet {
        let mut out = self.clone();
        for p in out.params.values_mut() {
            p.role = ParamRole::Adaptable;
        }
        out
    }

    /// Mutable access restricted to adaptable parameters.
    pub fn adaptable_mut(&mut self, name: &str) -> Result<&mut Tensor, NumError> {
        match self.params.get_mut(name) {
            Some(p) if p.role == ParamRole::Adaptable => Ok(&mut p.value),
            Some(_) => Err(NumError::FrozenParameter(name.to_string())),
            None => Err(NumError::UnknownParameter(name.to_string())),
        }
    }

    /// Replaces the value of an existing parameter regardless of role.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NumError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(NumError::ParameterShape {
                name: name.to_string(),
                expected: p.value.shape(),
                found: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn shape_of(&self, name: &str) -> Option<Shape> {
        self.get(name).map(Tensor::shape)
    }

    /// Exact bit patterns of all tensors with the given role, keyed by name.
    pub fn snapshot_bits(&self, role: ParamRole) -> BTreeMap<String, Vec<u64>> {
        self.iter()
            .filter(|(_, p)| p.role == role)
            .map(|(k, p)| (k.to_string(), p.value.to_bits()))
            .collect()
    }
}

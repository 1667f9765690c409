use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named learnable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = value.zeros_like();
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// Replace the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "Param::set_value",
                format!(
                    "{}: {:?} vs {:?}",
                    self.name,
                    self.value.shape(),
                    value.shape()
                ),
            ));
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }

    pub(crate) fn value_mut_and_grad(&mut self) -> (&mut [f64], &[f64]) {
        (self.value.data_mut(), self.grad.data())
    }

    pub(crate) fn accumulate_grad(&mut self, g: &Tensor) {
        self.grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        self.grad = self.value.zeros_like();
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::domain(
                "ParamSet::insert",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param::new(name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::domain("ParamSet::get", format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::domain(
                "ParamSet::get_mut",
                format!("no parameter `{name}`"),
            )),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(Param::value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// True when both sets hold the same names in the same order with equal shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

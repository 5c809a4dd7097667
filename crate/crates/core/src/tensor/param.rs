use std::collections::HashMap;
use std::sync::Arc;

use super::{Element, Shape, Tensor};
use crate::error::TensorError;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F: Element> {
    pub name: String,
    pub value: Arc<Tensor<F>>,
    pub grad: Tensor<F>,
}

/// Ordered, named parameter collection. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Element> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; panics on duplicate names since that is a
    /// construction bug, not a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            name,
            value: Arc::new(value),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor<F>> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "set_value",
                format!("`{}` {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape())).collect()
    }

    /// Same names and ids at another precision; gradients reset.
    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

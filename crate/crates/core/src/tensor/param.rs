use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::element::Element;
use super::storage::{numel, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensor. Names are hierarchical paths such as
/// `encoder.stage1.block0.attn.qkv.weight`.
#[derive(Clone, Debug)]
pub struct Parameter<E> {
    name: String,
    value: Arc<Tensor<E>>,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Parameter {
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor<E>> {
        self.value.clone()
    }

    /// Mutable access; copies only if a tape still holds the value.
    pub fn value_mut(&mut self) -> &mut Tensor<E> {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor<E>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = Arc::new(value);
        Ok(())
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated to two standard deviations.
    TruncNormal { std: f64 },
    /// Normal with std sqrt(2 / fan_in).
    Kaiming { fan_in: usize },
}

impl Init {
    pub fn sample<E: Element, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<E> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape.to_vec(), |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break E::from_f64(v);
                    }
                })
            }
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape.to_vec(), |_| E::from_f64(normal.sample(rng)))
            }
        }
    }
}

/// Declared shape and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    params: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
}

/// Position of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Allocates every spec in order, drawing from `rng` sequentially.
    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            store.insert(Parameter::new(
                spec.name.clone(),
                spec.init.sample(&spec.shape, rng),
            ))?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, p: Parameter<E>) -> Result<ParamId> {
        if self.index.contains_key(p.name()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {}",
                p.name()
            )));
        }
        let id = self.params.len();
        self.index.insert(p.name().to_string(), id);
        self.params.push(p);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<E>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }
}

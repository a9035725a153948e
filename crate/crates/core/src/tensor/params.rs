use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Grads, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors with gradient buffers of matching shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    has_grad: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            has_grad: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::ZERO);
        }
        self.has_grad = false;
    }

    /// Adds gradients from a backward pass into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Grads<T>) -> Result<()> {
        for (i, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = self.params.get_mut(i).ok_or_else(|| Error::Shape {
                op: "accumulate",
                detail: format!("gradient for unknown parameter {i}"),
            })?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "accumulate",
                    detail: format!("{}: {:?} vs {:?}", p.name, p.grad.shape(), g.shape()),
                });
            }
            p.grad.add_assign(g);
        }
        self.has_grad = true;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            has_grad: self.has_grad,
        }
    }

    /// Copies values for every parameter whose name appears in `other`.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {}", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Normal(0, std) truncated at ±2·std by resampling.
pub fn trunc_normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

pub const INIT_STD: f64 = 0.02;

//! Dense f64 tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus a row-major array, with an
//! optional same-shape gradient buffer. Differentiation happens on a
//! [`Tape`](tape::Tape): forward ops append nodes, `backward` walks them in
//! reverse and accumulates into the [`Parameter`]s of a [`ParamSet`].
//! Everything is f64; toy scale makes memory irrelevant and it keeps
//! finite-difference checks tight.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::{Error, Result};

pub mod adam;
pub mod kernels;
pub mod tape;
#[cfg(test)]
pub(crate) mod testutil;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use tape::{Tape, Var};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense multi-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::Dimension(alloc::format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Allocate (or keep) the gradient buffer.
    pub fn track_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }
}

/// Named, gradient-tracked tensor owned by a network.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Stable handle of a parameter within one [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// The parameters of one network, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique within the set.
    pub fn add(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Argument(alloc::format!(
                "duplicate parameter name {name:?}"
            )));
        }
        tensor.track_grad();
        self.params.push(Parameter {
            name: String::from(name),
            tensor,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Overwrite the values of the parameter called `name`.
    ///
    /// Used by checkpoint loading; the shape must match exactly.
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::State(alloc::format!("unknown parameter {name:?}")))?;
        if p.tensor.numel() != values.len() {
            return Err(Error::State(alloc::format!(
                "parameter {name:?} has {} values, checkpoint record has {}",
                p.tensor.numel(),
                values.len()
            )));
        }
        p.tensor.values_mut().copy_from_slice(values);
        Ok(())
    }
}

/// He-uniform initialization: U(-a, a) with a = sqrt(6 / fan_in).
pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = crate::math::sqrt(6.0 / fan_in.max(1) as f64);
    let n = numel(&shape);
    let values = (0..n).map(|_| rng::uniform(rng, -a, a)).collect();
    Tensor {
        shape,
        values,
        grad: None,
    }
}

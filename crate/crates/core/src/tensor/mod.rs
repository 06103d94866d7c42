//! Dense N-dimensional arrays with reverse-mode automatic differentiation.
//!
//! The [`Tensor`] is a plain row-major value carrier; differentiation happens
//! through a [`Tape`] that records every primitive applied to tape nodes and
//! replays them in reverse. The primitive set is exactly what the pose
//! regression network and its losses need: elementwise arithmetic, matmul,
//! 2-D convolution, ELU/ReLU, per-channel affine, global average pooling,
//! channel concatenation, reshape, exp/square/sqrt/sum, L2 norm and dropout.

mod conv;
pub mod gradcheck;
mod tape;

pub use tape::{Gradients, NodeId, Op, Padding, Tape};

use crate::error::{Error, Result};

/// Row-major dense array of f64 values.
///
/// `shape == []` denotes a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} implies {} elements, data has {}",
                    numel_of(&shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
        }
    }

    /// Mark this tensor as a differentiation leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Extract the value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape {
                op: "item",
                detail: format!("expected scalar, got shape {:?}", self.shape),
            })
        }
    }
}

//! Dense row-major f32 tensors.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Identifier of a node on the autodiff tape.
pub type NodeId = usize;

/// A dense n-dimensional array of 32-bit floats.
///
/// Data is shared behind an [`Arc`] so that tensors can be handed to the
/// tape without copying; mutation goes through [`Tensor::data_mut`] which
/// is copy-on-write when the buffer is shared.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// Gradient buffer, populated for leaves after a backward pass.
    pub grad: Option<Vec<f32>>,
    /// Tape node that produced this tensor, if any.
    pub node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                what: "element count",
                expected: format!("{n} (shape {shape:?})"),
                got: data.len().to_string(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
            grad: None,
            node: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
            grad: None,
            node: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The shared buffer, for zero-copy hand-off to the tape.
    pub(crate) fn buffer(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_buffer(shape: Vec<usize>, data: Arc<Vec<f32>>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            node,
        }
    }

    /// True when this tensor still shares the given buffer.
    pub(crate) fn aliases(&self, buffer: &Arc<Vec<f32>>) -> bool {
        Arc::ptr_eq(&self.data, buffer)
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Strips graph linkage and gradient, keeping the value.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            grad: None,
            node: None,
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

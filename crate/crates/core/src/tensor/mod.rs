//! Dense f64 tensors and a reverse-mode autodiff tape over them.
//!
//! [`Tensor`] is a plain value (shape plus row-major data). Differentiation
//! happens on a [`Tape`]: values are registered as leaves, every operation
//! appends a node, and [`Tape::backward`] replays the nodes in reverse.

mod check;
pub mod kernels;
mod tape;

pub use check::{finite_diff_gradient, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use tape::{Gradients, Tape, Var};

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Shape,
    },
    #[error("element count of {dims:?} overflows usize")]
    Overflow { dims: Vec<usize> },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { len: usize, shape: Shape },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Ordered list of extents, `[B, C, H, W]` for activations.
///
/// Extents of zero are allowed so that empty tensors (e.g. a zero-channel
/// operand to a concat) can be represented.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Overflow { dims: dims.clone() })?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Destructure a rank-4 shape as `(B, C, H, W)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                got: self.clone(),
            }),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(dims: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    /// One `[C, H, W]` slice of a `[B, C, H, W]` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.shape.dims4("batch_item")?;
        if index >= b {
            return Err(TensorError::invalid("batch_item", format!("index {index} out of range for batch {b}")));
        }
        let n = c * h * w;
        Tensor::new(vec![c, h, w], self.data[index * n..(index + 1) * n].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::invalid("stack", "no tensors to stack"))?;
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(dims, data)
    }
}

//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The carrier type is [`Tensor`]: a shape plus a contiguous row-major
//! buffer of `f32` (training mode) or `f64` (verification mode).
//! Differentiable computations are expressed against a [`Tape`], which
//! records every operation and replays them in reverse on
//! [`Tape::backward`].

mod kernels;
mod tape;

pub mod checkpoint;

pub use tape::{ReduceKind, S2NeighborMap, Tape, UnaryKind, Var};

use std::fmt;

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum<Self>
    + Copy
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Element type tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_len(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements but the buffer holds {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error(
        "exp overflow in {dtype} mode: input magnitude {magnitude:.6e} exceeds the finite \
         exponent range; rescale queries/keys before forming features"
    )]
    ExpOverflow { dtype: &'static str, magnitude: f64 },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this tape; build a fresh tape per step")]
    RepeatedBackward,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. Immutable after creation; all mutation happens
/// through the owning [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }
}

/// Splits a shape into (leading batch extent product, trailing matrix dims).
/// Rank-2 tensors have batch 1.
pub(crate) fn batch_and_matrix(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let rows = shape[shape.len() - 2];
    let cols = shape[shape.len() - 1];
    let batch = shape[..shape.len() - 2].iter().product();
    Some((batch, rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            TensorError::LengthMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 6);
                assert_eq!(actual, 5);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(3.5f64);
        assert!(t.shape().is_empty());
        assert_eq!(t.numel(), 1);
        assert!(t.is_scalar());
    }

    #[test]
    fn dtype_roundtrip() {
        for d in [Dtype::F32, Dtype::F64] {
            assert_eq!(Dtype::from_tag(d.tag()), Some(d));
        }
        assert_eq!(Dtype::from_tag(9), None);
    }
}

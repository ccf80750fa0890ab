//! Dense 4-D tensors with reverse-mode automatic differentiation.
//!
//! The graph is a [`Tape`]: every operation appends a node holding its output
//! values and enough information to push gradients back to its inputs. Handles
//! ([`TensorId`]) are plain indices, so a whole graph lives in one allocation
//! arena and is dropped at once. Data that outlives a tape (model inputs,
//! extracted outputs, checkpoints) travels as [`TensorBuf`].
//!
//! Precision is a type parameter: `f32` for training, `f64` for
//! finite-difference gradient checking. One tape uses one precision.

mod conv;
mod norm;
mod tape;

pub use tape::{Elementwise, Pointwise, Tape, TensorId};

use crate::error::{Error, Result};

/// Numeric precision of a tensor graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// 32-bit reals; the training default.
    Standard,
    /// 64-bit reals; required for gradient checking.
    Extended,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Standard => write!(f, "standard (f32)"),
            Precision::Extended => write!(f, "extended (f64)"),
        }
    }
}

/// Scalar element of a tensor graph. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Standard;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Extended;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dimensions of a 4-D tensor in (batch, channels, rows, cols) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "all dimensions must be >= 1, got {}x{}x{}x{}",
                n, c, h, w
            )));
        }
        Ok(Shape { n, c, h, w })
    }

    /// Total element count `n*c*h*w`.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are all >= 1 by construction
    }

    /// Row-major flat index in (n, c, h, w) order.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// Pixels per plane, `h*w`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn scalar() -> Self {
        Shape { n: 1, c: 1, h: 1, w: 1 }
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// An owned tensor payload detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf<R> {
    pub shape: Shape,
    pub values: Vec<R>,
}

impl<R: Real> TensorBuf<R> {
    pub fn new(shape: Shape, values: Vec<R>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(format!(
                "value count {} does not match shape {} = {} elements",
                values.len(),
                shape,
                shape.len()
            )));
        }
        Ok(TensorBuf { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        TensorBuf {
            shape,
            values: vec![R::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape, v: R) -> Self {
        TensorBuf {
            shape,
            values: vec![v; shape.len()],
        }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> R {
        self.values[self.shape.idx(n, c, y, x)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_dims() {
        assert!(Shape::new(1, 0, 3, 3).is_err());
        assert!(Shape::new(2, 3, 4, 5).is_ok());
    }

    #[test]
    fn row_major_indexing() {
        let s = Shape::new(2, 3, 4, 5).unwrap();
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), s.len() - 1);
    }

    #[test]
    fn buf_checks_length() {
        let s = Shape::new(1, 1, 2, 2).unwrap();
        assert!(TensorBuf::new(s, vec![0.0f32; 3]).is_err());
        assert!(TensorBuf::new(s, vec![0.0f32; 4]).is_ok());
    }
}

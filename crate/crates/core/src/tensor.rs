//! Dense row-major tensors and the scalar types the numeric stack is generic over.
//!
//! Training runs in `f32`; every oracle comparison (finite differences, naive
//! re-summations) runs the same code instantiated at `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating-point element type for tensors and tapes.
pub trait Scalar:
    num_traits::Float
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Precision label used in messages ("f32" / "f64").
    const NAME: &'static str;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Stable identity of a named parameter tensor, e.g. `layers.0.q_proj`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        ParamId(name.into())
    }

    #[must_use]
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `layers.{layer}.{suffix}` — the naming scheme used by the model.
    pub fn layer(layer: usize, suffix: &str) -> Self {
        ParamId(format!("layers.{layer}.{suffix}"))
    }

    /// Derived id for an attached low-rank factor.
    pub fn with_suffix(&self, suffix: &str) -> Self {
        ParamId(format!("{}.{suffix}", self.0))
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ParamId({})", self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        ParamId(s.to_string())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("expected a matrix, got rank-{0} tensor")]
    NotAMatrix(usize),
    #[error("expected a scalar, got shape {0:?}")]
    NotAScalar(Vec<usize>),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("block {block} of size {block_size} out of range for {extent} {axis}")]
    BlockOutOfRange {
        axis: &'static str,
        block: usize,
        block_size: usize,
        extent: usize,
    },
    #[error("cannot remove all {0} blocks along an axis")]
    WouldEmptyAxis(usize),
}

/// Dense row-major tensor. Rank is almost always 1 or 2 in practice.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    tag: Option<ParamId>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); shape.iter().product()],
            tag: None,
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            tag: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            tag: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            tag: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self, TensorError> {
        Self::from_vec(&[rows, cols], data)
    }

    #[must_use]
    pub fn with_tag(mut self, tag: ParamId) -> Self {
        self.tag = Some(tag);
        self
    }

    pub fn clear_tag(mut self) -> Self {
        self.tag = None;
        self
    }

    pub fn tag(&self) -> Option<&ParamId> {
        self.tag.as_ref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn elem_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count; panics on non-matrix tensors (programmer error).
    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    /// Column count; panics on non-matrix tensors (programmer error).
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> E {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: E) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Extract the single element of a one-element tensor.
    pub fn item(&self) -> Result<E, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotAScalar(self.shape.clone()))
        }
    }

    /// NaN/Inf detection is an explicit checked state, never silent.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(TensorError::NonFinite { index }),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            tag: None,
        }
    }

    /// Elementwise in-place accumulate; shapes must already match.
    pub fn add_assign(&mut self, other: &Tensor<E>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, factor: E) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Re-instantiate at a different precision. The tag is preserved.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::of_f64(v.as_f64())).collect(),
            tag: self.tag.clone(),
        }
    }

    /// Copy without the contiguous row blocks listed in `removed`
    /// (block `b` covers rows `b*block_size .. (b+1)*block_size`).
    pub fn remove_row_blocks(
        &self,
        block_size: usize,
        removed: &[usize],
    ) -> Result<Tensor<E>, TensorError> {
        let rows = self.rows();
        let cols = self.cols();
        let n_blocks = rows / block_size;
        let keep = keep_mask("rows", n_blocks, block_size, rows, removed)?;
        let mut data = Vec::with_capacity((n_blocks - removed.len()) * block_size * cols);
        for b in 0..n_blocks {
            if keep[b] {
                data.extend_from_slice(&self.data[b * block_size * cols..(b + 1) * block_size * cols]);
            }
        }
        Tensor::matrix((n_blocks - removed.len()) * block_size, cols, data)
    }

    /// Copy without the contiguous column blocks listed in `removed`.
    pub fn remove_col_blocks(
        &self,
        block_size: usize,
        removed: &[usize],
    ) -> Result<Tensor<E>, TensorError> {
        let rows = self.rows();
        let cols = self.cols();
        let n_blocks = cols / block_size;
        let keep = keep_mask("columns", n_blocks, block_size, cols, removed)?;
        let new_cols = (n_blocks - removed.len()) * block_size;
        let mut data = Vec::with_capacity(rows * new_cols);
        for i in 0..rows {
            let row = &self.data[i * cols..(i + 1) * cols];
            for b in 0..n_blocks {
                if keep[b] {
                    data.extend_from_slice(&row[b * block_size..(b + 1) * block_size]);
                }
            }
        }
        Tensor::matrix(rows, new_cols, data)
    }
}

fn keep_mask(
    axis: &'static str,
    n_blocks: usize,
    block_size: usize,
    extent: usize,
    removed: &[usize],
) -> Result<Vec<bool>, TensorError> {
    let mut keep = vec![true; n_blocks];
    for &b in removed {
        if b >= n_blocks || n_blocks * block_size != extent {
            return Err(TensorError::BlockOutOfRange {
                axis,
                block: b,
                block_size,
                extent,
            });
        }
        keep[b] = false;
    }
    if keep.iter().all(|k| !k) && n_blocks > 0 {
        return Err(TensorError::WouldEmptyAxis(n_blocks));
    }
    Ok(keep)
}

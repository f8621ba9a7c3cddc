//! Dense row-major tensors and the error type shared by all numeric ops.
//!
//! A [`Tensor`] is a plain value: a shape and a flat `f64` buffer. Gradient
//! bookkeeping lives on the [tape](crate::tape); params, datasets and
//! predictions all pass tensors around by value.

use thiserror::Error;

/// Scalar type used throughout the crate.
pub type Real = f64;

/// Errors raised by tensor construction and tape primitives.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible for the op. The message names the
    /// offending shapes.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// An op produced NaN or an infinity. Values on the tape must stay
    /// finite; hitting this during training signals divergence.
    #[error("{op}: produced a non-finite value (NaN or infinity)")]
    NonFinite { op: &'static str },
    /// A non-shape argument is out of contract (bad index, empty input,
    /// invalid permutation, ...).
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Invalid { op, detail: detail.into() }
    }
}

/// Render a shape as `[d0, d1, ...]` for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

/// Row-major strides of a shape (last dimension contiguous).
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Reorder `data` with shape `shape` by the axis permutation `perm`
/// (output axis `d` is input axis `perm[d]`). Returns the permuted shape
/// and buffer. `perm` must already be validated by the caller.
pub(crate) fn permute_data(shape: &[usize], data: &[Real], perm: &[usize]) -> (Vec<usize>, Vec<Real>) {
    let out_shape: Vec<usize> = perm.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; data.len()];
    // Walk output positions in order; map each multi-index back to the input.
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut i = 0;
        for d in 0..out_shape.len() {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            i += c * in_strides[perm[d]];
        }
        *slot = data[i];
    }
    (out_shape, out)
}

/// A dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    /// Build a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {} implies {} elements, got {}", fmt_shape(&shape), numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Shape-`[1]` scalar.
    pub fn scalar(value: Real) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// 1-d tensor from a slice.
    pub fn vector(values: &[Real]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of dimension `d`.
    pub fn dim(&self, d: usize) -> usize {
        self.shape[d]
    }

    /// Size of the last dimension (1 for a 0-d tensor).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor. Panics otherwise; use only where the
    /// shape is known by construction (losses, reductions).
    pub fn item(&self) -> Real {
        assert!(self.is_scalar(), "item() on non-scalar tensor of shape {}", fmt_shape(&self.shape));
        self.data[0]
    }

    /// Index of the first NaN/infinite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

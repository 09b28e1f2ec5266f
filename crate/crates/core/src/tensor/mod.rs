//! Dense tensors and the reverse-mode engine that differentiates them.
//!
//! Everything numeric in the crate flows through [`Tensor`]. Training stores
//! 32-bit values; gradient checks rebuild the same graph over `f64` through the
//! [`Scalar`] abstraction, so every kernel here is generic over the element type.

mod graph;
pub mod gradcheck;
pub mod init;
mod kernels;
pub mod optim;

use std::fmt;

use num_traits::{Float, NumAssign};
use thiserror::Error;

pub use graph::{Graph, Var};
pub use optim::{OptimError, OptimizerConfig, ParamId, ParamSet, Parameter, Sgd};

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + NumAssign + Default + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha·A·B + beta·C`; A and B are strided views, C is row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(dims: GemmDims, alpha: Self, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), beta: Self, c: &mut [Self], c_cols: usize);
}

/// `(m, k, n)` of a matrix product `[m, k] · [k, n]`.
#[derive(Clone, Copy, Debug)]
pub struct GemmDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

fn check_gemm(dims: GemmDims, a_len: usize, a_strides: (isize, isize), b_len: usize, b_strides: (isize, isize), c_len: usize, c_cols: usize) {
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(span(dims.m, dims.k, a_strides) as usize <= a_len, "gemm: A out of bounds");
    assert!(span(dims.k, dims.n, b_strides) as usize <= b_len, "gemm: B out of bounds");
    assert!(c_cols == dims.n && dims.m * dims.n <= c_len, "gemm: C out of bounds");
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(d: GemmDims, alpha: f32, a: &[f32], (rsa, csa): (isize, isize), b: &[f32], (rsb, csb): (isize, isize), beta: f32, c: &mut [f32], c_cols: usize) {
        check_gemm(d, a.len(), (rsa, csa), b.len(), (rsb, csb), c.len(), c_cols);
        // SAFETY: every strided access stays within the slices, as checked above.
        unsafe {
            matrixmultiply::sgemm(d.m, d.k, d.n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), c_cols as isize, 1);
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(d: GemmDims, alpha: f64, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), beta: f64, c: &mut [f64], c_cols: usize) {
        check_gemm(d, a.len(), (rsa, csa), b.len(), (rsb, csb), c.len(), c_cols);
        // SAFETY: every strided access stays within the slices, as checked above.
        unsafe {
            matrixmultiply::dgemm(d.m, d.k, d.n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), c_cols as isize, 1);
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: zero-sized output along {dim}")]
    EmptyOutput { op: &'static str, dim: String },
    #[error("{op}: invalid argument: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// N-dimensional row-major array. 5-D activations use (batch, channel, time, height, width).
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Gradient buffer, populated by [`Graph::write_param_grads`] for parameters.
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("grad", &self.grad.is_some())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking that the shape covers the buffer exactly.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                reason: format!("zero extent in shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                dim: "element count".into(),
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                dim: "element count".into(),
                expected: self.data.len(),
                actual: n,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| T::from_f64(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Slice along the leading (batch) axis.
    pub fn batch_item(&self, index: usize) -> Tensor<S> {
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let first = items.first().ok_or(TensorError::Invalid {
            op: "stack",
            reason: "no tensors".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::Invalid {
                    op: "stack",
                    reason: format!("shape {:?} differs from {:?}", t.shape, first.shape),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(items: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let first = items.first().ok_or(TensorError::Invalid {
            op: "concat",
            reason: "no tensors".into(),
        })?;
        if first.shape.is_empty() {
            return Err(TensorError::Rank {
                op: "concat",
                expected: 1,
                shape: Vec::new(),
            });
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape.len() != first.shape.len() || t.shape[1..] != first.shape[1..] {
                return Err(TensorError::Invalid {
                    op: "concat",
                    reason: format!("shape {:?} does not extend {:?}", t.shape, first.shape),
                });
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    /// Row-wise softmax of a `[N, C]` tensor, max-subtracted.
    pub fn softmax_rows(&self) -> Result<Tensor<S>, TensorError> {
        let (n, c) = self.dims2("softmax")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        Tensor::new(vec![n, c], out)
    }

    /// Row-wise argmax of a `[N, C]` tensor; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>, TensorError> {
        let (_, c) = self.dims2("argmax")?;
        Ok(self
            .data
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [n, c] => Ok((n, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn dims5(&self, op: &'static str) -> Result<[usize; 5], TensorError> {
        match self.shape[..] {
            [a, b, c, d, e] => Ok([a, b, c, d, e]),
            _ => Err(TensorError::Rank {
                op,
                expected: 5,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// (time, height, width) triple used for kernel sizes, strides and padding.
pub type Triple = [usize; 3];

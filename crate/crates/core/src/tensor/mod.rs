//! Dense tensor containers and the differentiable operations the imputation
//! models are built from.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification). Layouts are NHWC with the channel innermost, so
//! per-pixel channel loops run over contiguous memory.

mod adam;
mod gradcheck;
mod loss;
mod lstm;
mod ops;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
pub use loss::masked_mse;
pub use lstm::{
    lstm_backward, lstm_forward, lstm_step, lstm_step_backward, LstmGrads, LstmStepGrads,
    LstmStepOut, LstmTape, LstmWeights,
};
pub use ops::{
    activation_backward, activation_forward, conv2d, conv2d_backward, dense, dense_backward,
    dropout, dropout_backward, dropout_forward, dropout_mask, maxpool2, maxpool2_backward,
    upsample2, upsample2_backward, Activation, Conv2dGrads, DenseGrads,
};
pub use params::{ParamSet, ParamTensor};

pub(crate) use ops::dot;

use thiserror::Error;

use crate::raster::CloudMask;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("mask selects no valid cells (empty denominator)")]
    EmptyMask,
    #[error("bad argument: {msg}")]
    BadArgument { msg: String },
}

fn shape_err(context: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        context: context.into(),
    }
}

/// Element type for tensors: IEEE-754 float with the conversions the
/// numerical kernels need.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// A dense rank-4 tensor in NHWC order (batch, height, width, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![T::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        data: Vec<T>,
    ) -> Result<Self, TensorError> {
        if data.len() != n * h * w * c {
            return Err(shape_err(format!(
                "data length {} for tensor {n}x{h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Self { n, h, w, c, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn c(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: T) {
        let i = ((n * self.h + y) * self.w + x) * self.c + c;
        self.data[i] = v;
    }

    /// Contiguous channel slice at one spatial position.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[T] {
        let start = ((n * self.h + y) * self.w + x) * self.c;
        &self.data[start..start + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, n: usize, y: usize, x: usize) -> &mut [T] {
        let start = ((n * self.h + y) * self.w + x) * self.c;
        &mut self.data[start..start + self.c]
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Tensor4<T>) -> bool {
        self.dims() == other.dims()
    }

    /// Reinterpret as a matrix of `n` rows by `h*w*c` columns (no copy of
    /// layout; the data order already matches).
    pub fn flatten_rows(&self) -> Mat<T> {
        Mat {
            rows: self.n,
            cols: self.h * self.w * self.c,
            data: self.data.clone(),
        }
    }

    /// Inverse of [`Tensor4::flatten_rows`].
    pub fn from_mat(m: &Mat<T>, h: usize, w: usize, c: usize) -> Result<Self, TensorError> {
        if m.cols != h * w * c {
            return Err(shape_err(format!(
                "matrix with {} cols cannot reshape to {h}x{w}x{c}",
                m.cols
            )));
        }
        Ok(Self {
            n: m.rows,
            h,
            w,
            c,
            data: m.data.clone(),
        })
    }

    pub fn map_into<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A dense row-major matrix, used for flattened features and recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "data length {} for matrix {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// A binary validity mask aligned with a [`Tensor4`]: 1 selects cells that
/// enter the masked loss, 0 excludes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    cells: Vec<u8>,
}

impl MaskTensor {
    pub fn new(
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        cells: Vec<u8>,
    ) -> Result<Self, TensorError> {
        if cells.len() != n * h * w * c {
            return Err(shape_err(format!(
                "mask length {} for tensor {n}x{h}x{w}x{c}",
                cells.len()
            )));
        }
        if cells.iter().any(|&v| v > 1) {
            return Err(TensorError::BadArgument {
                msg: "mask cells must be 0 or 1".into(),
            });
        }
        Ok(Self { n, h, w, c, cells })
    }

    /// Stack per-date cloud masks and broadcast each across `c` channels, so
    /// the result aligns with a batch tensor of images.
    pub fn broadcast_masks(masks: &[&CloudMask], c: usize) -> Result<Self, TensorError> {
        let first = masks.first().ok_or_else(|| TensorError::BadArgument {
            msg: "at least one mask required".into(),
        })?;
        let (h, w) = (first.height(), first.width());
        let mut cells = Vec::with_capacity(masks.len() * h * w * c);
        for m in masks {
            if m.height() != h || m.width() != w {
                return Err(shape_err(format!(
                    "mask {}x{} in a stack of {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
            for &cell in m.cells() {
                for _ in 0..c {
                    cells.push(cell);
                }
            }
        }
        Ok(Self {
            n: masks.len(),
            h,
            w,
            c,
            cells,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn count_selected(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 1).count()
    }
}

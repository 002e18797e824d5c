//! Dense 4-D tensors with a small reverse-mode autodiff tape.
//!
//! The operator set is exactly what RED-CNN training needs: 2-D convolution,
//! transposed convolution, ReLU, elementwise add, sum and mean squared error.
//! Storage is generic over [`Scalar`] so gradient checks can run in `f64`
//! while training and model files stay in `f32`.

mod conv;
mod optim;
mod param;
mod tape;

pub use conv::{
    conv2d_backward, conv2d_forward, conv_output_dim, deconv2d_backward, deconv2d_forward, deconv_output_dim, ConvGrads,
};
pub use optim::{adam_step, AdamConfig, EarlyStopMode, PlateauScheduler, ScheduleStep, TrainSchedule};
pub use param::{ParamEntry, ParamSet};
pub use tape::{Tape, Var};

use std::fmt;
use thiserror::Error;

/// Errors raised by tensor construction, operators and the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: [usize; 4], len: usize },
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("{op}: output spatial size would be non-positive for input {input:?}")]
    EmptyOutput { op: &'static str, input: [usize; 4] },
    #[error("autodiff state error: {0}")]
    State(String),
    #[error("non-finite gradient in parameter `{name}` ({count} bad entries)")]
    NonFiniteGradient { name: String, count: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element type used by the engine.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_bounds(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(c >= m * n, "gemm: output buffer too small");
    assert!(a >= m * k && b >= k * n, "gemm: operand buffer too small");
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        gemm_bounds(m, k, n, a.len(), b.len(), c.len());
        // SAFETY: bounds asserted above; strides describe dense layouts inside the slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        gemm_bounds(m, k, n, a.len(), b.len(), c.len());
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Contiguous NCHW tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor, checking length and finiteness.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Shape { shape, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: [usize; 4], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_raw([1, 1, 1, 1], vec![v])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Elements of one batch item, `channels * height * width` long.
    pub fn item(&self, n: usize) -> &[T] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4::from_raw(
            self.shape,
            self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        )
    }

    /// Stacks single-item tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::State("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(TensorError::Dimension {
                    op: "stack",
                    left: first.shape,
                    right: t.shape,
                });
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_raw([n, c, h, w], data))
    }

    /// Splits a batch into single-item tensors.
    pub fn unstack(&self) -> Vec<Tensor4<T>> {
        let [n, c, h, w] = self.shape;
        (0..n)
            .map(|i| Tensor4::from_raw([1, c, h, w], self.item(i).to_vec()))
            .collect()
    }
}

pub(crate) fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::Dimension {
            op,
            left: a.shape,
            right: b.shape,
        });
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<T> {
    check_same_shape("mse_loss", pred, target)?;
    if pred.is_empty() {
        return Err(TensorError::State("mse of empty tensors".into()));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let s: T = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(s / n)
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `grad` where the forward input was not strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape("relu_backward", input, grad)?;
    Ok(Tensor4::from_raw(
        input.shape,
        input
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
    ))
}

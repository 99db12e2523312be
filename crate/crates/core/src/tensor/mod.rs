//! Deterministic dense-tensor engine.
//!
//! Every layer primitive is a pure function over input buffers that writes a
//! freshly allocated output. Backward passes return gradients instead of
//! mutating shared state, so callers decide where to accumulate them. Work is
//! only ever split over disjoint output coordinates, which keeps results
//! bitwise identical for any thread count.

mod conv;
pub mod gradcheck;
mod init;
mod linear;
mod norm;
mod optim;
mod structural;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::OnceLock;

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

pub use conv::{conv2d_backward, conv2d_forward, conv_output_dim, Conv2dGrads};
pub use init::{kaiming_bound, kaiming_uniform_init, uniform_init, SeededRng};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use norm::{batchnorm_backward, batchnorm_eval, batchnorm_train, BatchNormCache, BatchNormConfig, BatchNormGrads};
pub use optim::{cosine_lr, OptimizerState};
pub use structural::{
    add_backward, add_forward, concat_backward, concat_forward, gap_backward, gap_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, MaxPoolCache,
};

/// Floating-point element type the engine computes in.
///
/// Training runs in `f32`; gradient checks instantiate the same kernels in `f64`.
pub trait Scalar: Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static {
    /// Tag written into checkpoints.
    const DTYPE_TAG: u8;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{op}: dimension mismatch on axis `{axis}` (expected {expected}, got {actual})")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("non-finite gradient for parameter `{layer}`")]
    NonFiniteGradient { layer: String },
    #[error("{op}: variance plus epsilon is not positive")]
    NonPositiveVariance { op: &'static str },
}

impl EngineError {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        EngineError::Dimension {
            op,
            axis: axis.into(),
            expected,
            actual,
        }
    }
}

/// Row-major dense array with an optional gradient buffer of identical length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, EngineError> {
        if shape.is_empty() {
            return Err(EngineError::InvalidArgument {
                op: "tensor",
                msg: "shape must have at least one axis".into(),
            });
        }
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(EngineError::InvalidArgument {
                op: "tensor",
                msg: format!("axis {axis} has size zero"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EngineError::dim("tensor", "data length", numel, data.len()));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("positive shape")
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(f).collect()).expect("positive shape")
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, EngineError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<(), EngineError> {
        if g.len() != self.data.len() {
            return Err(EngineError::dim("accumulate_grad", "length", self.data.len(), g.len()));
        }
        for (dst, &src) in self.grad_mut().iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, EngineError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(EngineError::dim("reshape", "element count", self.data.len(), numel));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn nchw(&self, op: &'static str) -> Result<[usize; 4], EngineError> {
        if self.rank() != 4 {
            return Err(EngineError::dim(op, "rank", 4, self.rank()));
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }
}

impl<T: Scalar> Display for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Thread pool for intra-operation parallelism, capped by `KEVO_THREADS`.
pub(crate) fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("KEVO_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// Dot product with a fixed eight-lane accumulation order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for lane in 0..8 {
            acc[lane] += a[base + lane] * b[base + lane];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

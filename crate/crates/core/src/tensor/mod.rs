//! Dense row-major tensors and the reverse-mode tape built on top of them.
//!
//! Precision is a type parameter: training runs at `f32`, while the `f64`
//! instantiation exists for gradient checking.

mod kernels;
mod optim;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use kernels::{conv2d, cross_entropy_value, softmax_channels, upsample_nearest, CeTarget, TargetMap, LOG_CLAMP};
pub use optim::{OptimizerState, Sgd};
pub use tape::{Gradients, Tape, Var};

/// Floating point element type usable by tensors and the tape.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    /// `C ← A·B + beta·C` on strided row/column layouts (m×k times k×n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self], rsc: isize);
}

macro_rules! strided_gemm {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self], rsc: isize) {
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
                    }
                };
                assert!(a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2));
                assert!(c.len() >= span(m, n, rsc, 1));
                // SAFETY: the asserts above keep every strided access inside the slices
                unsafe { $f(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), rsc, 1) }
            }
        }
    };
}

strided_gemm!(f32, matrixmultiply::sgemm);
strided_gemm!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Splits a 3-d shape into `(c, h, w)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!("expected C×H×W, got {:?}", self.shape))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

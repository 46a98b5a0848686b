//! Dense row-major tensors and the primitive kernels built on them.
//!
//! Values are stored as `f64`. A tensor in [`Precision::F32`] mode keeps every
//! element representable as an `f32`: kernels round their outputs through
//! `f32` before handing them back, so a 32-bit tensor behaves like 32-bit
//! storage while the accumulation inside a kernel stays in 64-bit.

pub mod ops;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    /// The wider of two modes; kernels combining tensors use this.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::F64 || other == Precision::F64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_precision(shape, data, Precision::default())
    }

    pub fn with_precision(shape: &[usize], mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        if precision == Precision::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            precision,
        })
    }

    /// Builds a tensor whose data is already known to match `shape` and precision.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            precision,
        }
    }

    /// Like `from_parts`, rounding data into the precision first.
    pub(crate) fn from_parts_rounded(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Self {
        if precision == Precision::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Self::from_parts(shape, data, precision)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts_rounded(shape.to_vec(), vec![value; n], Precision::default())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_parts_rounded(shape.to_vec(), (0..n).map(f).collect(), Precision::default())
    }

    /// Normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// values finite and, in 32-bit mode, representable.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Converts to another precision mode, rounding when narrowing.
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        Tensor::from_parts_rounded(self.shape.clone(), self.data.clone(), precision)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone(), self.precision))
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                acc * d + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts_rounded(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_leading(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor::from_parts(
            shape,
            self.data[index * inner..(index + 1) * inner].to_vec(),
            self.precision,
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

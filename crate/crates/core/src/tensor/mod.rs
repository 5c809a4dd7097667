//! Dense rank-4 tensors, the differentiable primitives the codec is built
//! from, and a reverse-mode gradient tape.
//!
//! Layout is always `(batch, channels, height, width)`, row-major and
//! contiguous. Element precision is a type parameter so the same graph can
//! run at 32-bit for training and inference and at 64-bit for gradient
//! checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub mod gradcheck;
pub mod kernels;
mod param;
mod tape;

#[cfg(test)]
mod tests;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, OpStats, Tape, Var};

use crate::error::TensorError;

/// Floating-point element type usable by the engine.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

pub type Shape = [usize; 4];

#[inline]
pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Shape,
    data: Vec<F>,
}

impl<F: Element> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

impl<F: Element> Tensor<F> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![F::zero(); numel(&shape)],
        }
    }

    pub fn full(shape: Shape, value: F) -> Self {
        Self {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape, data: Vec<F>) -> Result<Self, TensorError> {
        if data.len() != numel(&shape) {
            return Err(TensorError::shape(
                "from_vec",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| F::c(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + i) * w + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> F {
        self.data[self.index(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: F) {
        let k = self.index(n, c, i, j);
        self.data[k] = v;
    }

    /// Contiguous `H·W` plane of one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[F] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self, TensorError> {
        if numel(&shape) != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

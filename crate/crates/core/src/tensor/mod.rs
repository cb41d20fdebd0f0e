//! Dense tensors, the operator kernels the model graph needs, and a small
//! reverse-mode tape over those kernels.
//!
//! Everything is generic over [`Scalar`] so the same code paths run in `f32`
//! (training and inference) and `f64` (finite-difference gradient checks).

pub mod autograd;
pub mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use autograd::{Gradients, Tape, Var};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: expected {expected}, got shape {actual:?}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: non-finite value {value}")]
    NonFinite { op: &'static str, value: String },
}

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, actual: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Samples i.i.d. `N(0, std^2)` values.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: n,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(op, "a rank-4 tensor", &self.shape)),
        }
    }
}

/// Parameters of a square-kernel 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(out_channels, in_channels / groups, k, k)`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    /// Only ever `> 1` on counting-only architectures.
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self, TensorError> {
        let p = Self {
            weight,
            bias,
            stride,
            padding,
            groups: 1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let s = self.weight.shape();
        if s.len() != 4 || s[0] == 0 || s[1] == 0 || s[2] != s[3] || s[2] == 0 {
            return Err(shape_err("conv", "weight (t, u, k, k) with t, u, k >= 1", s));
        }
        if self.stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: "stride must be positive".into(),
            });
        }
        if self.groups == 0 || !s[0].is_multiple_of(self.groups) {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: format!("groups {} does not divide {} output channels", self.groups, s[0]),
            });
        }
        if let Some(b) = &self.bias {
            if b.shape() != [s[0]] {
                return Err(shape_err("conv", format!("bias of shape [{}]", s[0]), b.shape()));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output spatial extent for an input extent, `None` if the window does not fit.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        ops::out_extent(input, self.kernel(), self.stride, self.padding)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.groups != 1 {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: "grouped convolution is counting-only and cannot be executed".into(),
            });
        }
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, actual: 5, .. }));
    }

    #[test]
    fn conv_params_validate_bias_length() {
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let err = ConvParams::new(w, Some(Tensor::zeros(&[3])), 1, 1).unwrap_err();
        assert!(err.to_string().contains("bias"));
    }

    #[test]
    fn cast_round_trips_exact_values() {
        let t = Tensor::<f32>::new(vec![3], vec![0.1, -2.5, 3.0e-8]).unwrap();
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}

//! Dense 4-D tensor storage.
//!
//! Every activation, weight and per-channel vector in the engine is a
//! [`Tensor`]: a contiguous row-major (N, C, H, W) array of `f32` or `f64`.
//! Per-channel vectors (biases, batch-norm parameters) use shape (1, C, 1, 1).

use crate::error::{Error, Result};
use crate::rng::RngState;
use serde::{Deserialize, Serialize};

/// Element type for tensors. Training and inference run in `f32`; gradient
/// checking runs the same code paths in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Element precision tag, as recorded in checkpoint tensor directories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// (N, C, H, W) extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous row-major NCHW array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Per-channel vector, stored as (1, C, 1, 1).
    pub fn channel_vec(values: Vec<T>) -> Self {
        let c = values.len();
        Tensor {
            shape: Shape::new(1, c, 1, 1),
            data: values,
        }
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut RngState) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64(lo + (hi - lo) * rng.next_f64()))
            .collect();
        Tensor { shape, data }
    }

    /// Normal samples with the given standard deviation.
    pub fn rand_normal(shape: Shape, std: f64, rng: &mut RngState) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64(std * rng.next_normal()))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// One (n, c) spatial plane as a slice of length H*W.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Errors unless every element is finite. Called by each primitive on its
    /// output: NaN/Inf anywhere is an engine fault, not a value.
    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Elementwise a*self + b*other; shapes must match.
    pub fn scaled_add(&self, a: T, other: &Tensor<T>, b: T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "scaled_add: {} vs {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    /// Accumulate `other` into self; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_assign: {} vs {}",
                self.shape, other.shape
            )));
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Single-image integer label map. Values lie in [0, num_classes) or equal
/// the dataset ignore index (255 by default).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "label map data length {} does not match {}x{}",
                data.len(),
                h,
                w
            )));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u16) -> Self {
        LabelMap {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u16) {
        self.data[y * self.w + x] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let r = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]);
        assert!(r.is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::from_vec(
            Shape::new(1, 2, 2, 2),
            (0..8).map(|i| i as f32).collect(),
        )
        .unwrap();
        assert_eq!(t.at(0, 0, 0, 1), 1.0);
        assert_eq!(t.at(0, 1, 0, 0), 4.0);
        assert_eq!(t.at(0, 1, 1, 1), 7.0);
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let mut t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(t.ensure_finite("test").is_ok());
        t.as_mut_slice()[1] = f32::NAN;
        assert!(t.ensure_finite("test").is_err());
    }

    #[test]
    fn cast_round_trips_exactly_representable_values() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -2.0, 3.25]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}

//! Dense NCHW tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{RegenError, Result};
use crate::scalar::Scalar;

/// Batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

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

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(RegenError::Shape(format!(
                "{} elements cannot fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn randn<R: Rng>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let s = self.shape;
        &mut self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// Contiguous `c x h x w` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(RegenError::Shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(RegenError::Shape(format!(
                "expected {shape}, found {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m {
                    d
                } else {
                    m
                }
            }))
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let s: f64 = self.data.iter().map(|v| v.to_f64_lossy()).sum();
        T::from_f64_lossy(s / self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Concatenate along channels; batch and spatial dims must agree.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(RegenError::Shape(format!(
                "cannot concatenate {sa} and {sb} along channels"
            )));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Tensor { shape, data })
    }

    /// Split along channels at `at`, inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let s = self.shape;
        if at > s.c {
            return Err(RegenError::Shape(format!("split at {at} exceeds {s}")));
        }
        let plane = s.plane();
        let mut a = Vec::with_capacity(s.n * at * plane);
        let mut b = Vec::with_capacity(s.n * (s.c - at) * plane);
        for n in 0..s.n {
            let src = self.sample(n);
            a.extend_from_slice(&src[..at * plane]);
            b.extend_from_slice(&src[at * plane..]);
        }
        Ok((
            Tensor {
                shape: Shape::new(s.n, at, s.h, s.w),
                data: a,
            },
            Tensor {
                shape: Shape::new(s.n, s.c - at, s.h, s.w),
                data: b,
            },
        ))
    }

    /// Stack single-sample tensors into one batch.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| RegenError::Shape("cannot stack an empty list".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(RegenError::Shape(format!("cannot stack {s} with {first}")));
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    /// Extract sample `n` as its own single-sample tensor.
    pub fn slice_sample(&self, n: usize) -> Self {
        let s = self.shape;
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.sample(n).to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_inputs() {
        let a = Tensor::<f32>::from_vec(Shape::new(2, 1, 1, 2), vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_vec(Shape::new(2, 2, 1, 2), (5..13).map(|v| v as f32).collect())
            .unwrap();
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 3, 1, 2));
        assert_eq!(cat.sample(0), &[1., 2., 5., 6., 7., 8.]);
        let (a2, b2) = cat.split_channels(1).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardUniform};

use crate::error::{Error, Result};

/// NCHW extent of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape::new(1, 1, 1, 1);

    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn from_dims(dims: &[usize]) -> Option<Self> {
        match *dims {
            [n, c, h, w] => Some(Shape::new(n, c, h, w)),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense row-major NCHW array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "data length {} does not match shape {shape} ({} elements)",
                    data.len(),
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for h in 0..shape.height {
                    for w in 0..shape.width {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    /// Samples from N(mean, std) using `rng`.
    pub fn randn(shape: Shape, mean: f32, std: f32, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(mean, std).expect("std must be finite and non-negative");
        let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
        Tensor4 { shape, data }
    }

    /// Samples uniformly from [lo, hi).
    pub fn rand_uniform(shape: Shape, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let u: f32 = StandardUniform.sample(rng);
                lo + (hi - lo) * u
            })
            .collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.channels + c) * s.height + h) * s.width + w]
    }

    /// Batch item `n` as a contiguous slice.
    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.expect_same_shape("dot", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    /// Rows `[start, end)` of the batch dimension.
    pub fn batch_slice(&self, start: usize, end: usize) -> Tensor4 {
        let len = self.shape.item();
        Tensor4 {
            shape: Shape {
                batch: end - start,
                ..self.shape
            },
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Stacks single-or-multi item tensors along the batch dimension.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            let s = t.shape;
            if (s.channels, s.height, s.width)
                != (first.shape.channels, first.shape.height, first.shape.width)
            {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape,
                    right: s,
                });
            }
            batch += s.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: Shape {
                batch,
                ..first.shape
            },
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor4::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("1x1x2x2"));
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = Tensor4::from_fn(Shape::new(2, 2, 2, 3), |[n, c, h, w]| {
            (n * 1000 + c * 100 + h * 10 + w) as f32
        });
        assert_eq!(t.at(1, 0, 1, 2), 1012.0);
        assert_eq!(t.data()[5], 12.0);
        assert_eq!(t.item(1)[0], 1000.0);
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor4::full(Shape::new(1, 1, 1, 2), 1.0);
        let b = Tensor4::full(Shape::new(2, 1, 1, 2), 2.0);
        let s = Tensor4::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), Shape::new(3, 1, 1, 2));
        assert_eq!(s.batch_slice(1, 3).data(), &[2.0; 4]);
    }
}

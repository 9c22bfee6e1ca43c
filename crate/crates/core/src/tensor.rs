//! Dense rank-4 tensors in row-major `(batch, height, width, channel)` order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor. Axis order is `[n, h, w, c]`.
///
/// Parameter tensors reuse the same four slots: a `Cout x Cin` matrix is
/// `[1, 1, Cout, Cin]` and a convolution kernel is `[kh, kw, Cin, Cout]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    /// `[1, 1, rows, cols]`
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape([1, 1, rows, cols])
    }

    /// `[1, 1, 1, len]`
    pub const fn vector(len: usize) -> Self {
        Shape([1, 1, 1, len])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Resulting shape when broadcasting `self` against `other`.
    ///
    /// Each axis must either agree or be 1 on one side.
    pub fn broadcast(&self, other: &Shape) -> Result<Shape> {
        let mut out = [0; 4];
        for axis in 0..4 {
            let (a, b) = (self.0[axis], other.0[axis]);
            out[axis] = if a == b {
                a
            } else if a == 1 {
                b
            } else if b == 1 {
                a
            } else {
                return Err(Error::InvalidShape(format!(
                    "cannot broadcast {self:?} with {other:?} (axis {axis})"
                )));
            };
        }
        Ok(Shape(out))
    }

    pub(crate) fn strides(&self) -> [usize; 4] {
        let [_, h, w, c] = self.0;
        [h * w * c, w * c, c, 1]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "[{n}x{h}x{w}x{c}]")
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, h, w, c] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for j in 0..h {
                for k in 0..w {
                    for l in 0..c {
                        data.push(f([i, j, k, l]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let s = self.shape.strides();
        idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let [_, h, w, c] = first.shape.0;
        let mut data = Vec::with_capacity(items.len() * h * w * c);
        for t in items {
            if t.shape.0[1..] != first.shape.0[1..] {
                return Err(Error::InvalidShape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (h * w * c).max(1);
        Tensor::from_vec(Shape::new(n, h, w, c), data)
    }

    /// The `i`-th batch item as a `[1, h, w, c]` tensor.
    pub fn item(&self, i: usize) -> Tensor {
        let [_, h, w, c] = self.shape.0;
        let len = h * w * c;
        Tensor {
            shape: Shape::new(1, h, w, c),
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

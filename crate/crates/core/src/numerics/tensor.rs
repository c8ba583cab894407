use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// (batch, channels, height, width)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_batch(&self, n: usize) -> Self {
        Self { n, ..*self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            bail!(
                Shape,
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            );
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs whose finiteness follows from
    /// finite inputs. Length is still checked in debug builds.
    pub(crate) fn from_raw(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::from_raw(shape, vec![0.0; shape.numel()])
    }

    pub fn full(shape: Shape4, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Shape4::scalar(), vec![value])
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            bail!(Shape, "expected a scalar, got shape {}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    /// Slice of one batch item.
    pub fn item_slice(&self, n: usize) -> &[f64] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies batch item `n` out as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor4 {
        Tensor4::from_raw(self.shape.with_batch(1), self.item_slice(n).to_vec())
    }

    /// Gathers the given batch items into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let len = self.shape.item_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.item_slice(i));
        }
        Tensor4::from_raw(self.shape.with_batch(indices.len()), data)
    }

    /// Contiguous batch range `[start, end)`.
    pub fn batch_range(&self, start: usize, end: usize) -> Tensor4 {
        let len = self.shape.item_len();
        Tensor4::from_raw(
            self.shape.with_batch(end - start),
            self.data[start * len..end * len].to_vec(),
        )
    }

    /// Concatenates along the batch axis.
    pub fn concat(parts: &[&Tensor4]) -> Result<Tensor4> {
        let Some(first) = parts.first() else {
            bail!(InvalidArgument, "cannot concatenate zero tensors");
        };
        let item = first.shape.with_batch(0);
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape.with_batch(0) != item {
                bail!(
                    Shape,
                    "cannot concatenate {} with {} along batch",
                    first.shape,
                    p.shape
                );
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4::from_raw(item.with_batch(n), data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        if self.shape != other.shape {
            bail!(
                Shape,
                "elementwise op on {} and {}",
                self.shape,
                other.shape
            );
        }
        Ok(Tensor4::from_raw(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn reshape(self, shape: Shape4) -> Result<Tensor4> {
        if shape.numel() != self.data.len() {
            bail!(Shape, "cannot reshape {} into {}", self.shape, shape);
        }
        Ok(Tensor4 {
            shape,
            data: self.data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.data)
    }
}

pub(crate) fn max_abs(data: &[f64]) -> f64 {
    data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

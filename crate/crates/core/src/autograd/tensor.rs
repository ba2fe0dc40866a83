use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// A tensor with an empty shape is a scalar holding one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Slice along the leading axis: items `start..end`.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self.shape.first().ok_or(Error::shape("slice_outer", "scalar"))?;
        if start >= end || end > outer {
            return Err(Error::shape(
                "slice_outer",
                format!("range {start}..{end} of {outer}"),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenate tensors along the leading axis.
    pub fn concat_outer(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("concat"))?;
        let tail = &first.shape[1..];
        let mut outer = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape.len() != first.shape.len() || &t.shape[1..] != tail {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            outer += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self { shape, data })
    }
}

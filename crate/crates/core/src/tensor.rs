//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense, contiguous, row-major array. 4-D tensors are laid out N×C×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a 4-D tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("tensor", format!("expected 4-D, got {:?}", self.shape))),
        }
    }

    /// Extents of a 2-D tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("tensor", format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64c())).collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape(), first.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        Ok(Tensor { shape, data })
    }

    /// Mirrors the last axis (horizontal flip for C×H×W or N×C×H×W images).
    pub fn flip_last_axis(&self) -> Self {
        let w = *self.shape.last().unwrap_or(&1);
        let mut out = self.data.clone();
        if w > 0 {
            for row in out.chunks_mut(w) {
                row.reverse();
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }
}

//! Dense row-major `f64` tensor.
//!
//! This is the single value type flowing through the computation graph:
//! images are `[C, H, W]`, matrices `[rows, cols]`, scalars `[1]`. The type
//! is a plain value — differentiability lives in the graph, not here.

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting data whose length does not match the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor_new", format!("zero-sized axis in {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Rank-one scalar wrapper (`shape = [1]`).
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
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

    /// Number of stored elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the tensor holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single stored value; panics if the tensor is not a scalar.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} values as {:?}", self.data.len(), shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Element access for rank-2 tensors.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2, "at2 on rank-{} tensor", self.shape.len());
        self.data[r * self.shape[1] + c]
    }

    /// Mutable element access for rank-2 tensors.
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Plain (non-graph) matrix product of two rank-2 tensors.
    pub fn matmul2(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul2",
                format!("incompatible shapes {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * c..(p + 1) * c];
                let acc = &mut out[i * c..(i + 1) * c];
                for (o, &b) in acc.iter_mut().zip(row.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// Plain transpose of a rank-2 tensor.
    pub fn transposed2(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose2", format!("rank {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

//! Dense row-major `f32` tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

/// A dense tensor. `dims.iter().product() == data.len()` always holds, and
/// a rank-0 tensor (empty `dims`) holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(shape_err("tensor", format!("zero-length dimension in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("dims {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    /// Like [`Tensor::new`], but also rejects NaN/Inf entries.
    pub fn finite(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self::new(dims, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(t)
    }

    pub fn scalar(v: f32) -> Self {
        Self { dims: Vec::new(), data: vec![v] }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self { dims: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(dims: &[usize], v: f32) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![v; n] }
    }

    /// Glorot-uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-a, a) as f32).collect();
        Self { dims: dims.to_vec(), data }
    }

    pub fn standard_normal(dims: &[usize], rng: &mut Rng) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: rng.normal_vec(n) }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(shape_err("item", format!("tensor has {} elements", self.data.len())));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` treating the last axis as columns and all leading
    /// axes as rows. Rank-0 is `(1, 1)`.
    pub fn as_rows(&self) -> (usize, usize) {
        match self.dims.last() {
            None => (1, 1),
            Some(&c) => (self.data.len() / c, c),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, c) = self.as_rows();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|v| f(*v)).collect() }
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(shape_err("transpose", format!("rank {} tensor", self.rank())));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Matrix product of two rank-2 tensors, accumulated in `f64`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(shape_err(
                "matmul",
                format!("expected rank-2 operands, got {:?} x {:?}", self.dims, other.dims),
            ));
        }
        let (m, k) = (self.dims[0], self.dims[1]);
        let (k2, n) = (other.dims[0], other.dims[1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims differ: {:?} x {:?}", self.dims, other.dims)));
        }
        let b: Vec<f64> = other.data.iter().map(|v| *v as f64).collect();
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let a = *a as f64;
                let b_row = &b[p * n..(p + 1) * n];
                for (o, bv) in acc.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = *v as f32;
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `self += alpha * other`, elementwise; dims must agree.
    pub fn axpy(&mut self, alpha: f32, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err("axpy", format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

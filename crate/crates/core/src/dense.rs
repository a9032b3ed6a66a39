//! Row-major `f32` matrices and the per-head `(Q, K, V)` bundle.

use crate::error::{Error, Result};

/// Row-major 32-bit float matrix whose values are all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    /// Wraps `data` as a `rows x cols` matrix, rejecting length mismatches and
    /// NaN/Inf entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from a generator; non-finite outputs are rejected.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Option<f32> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}

/// One attention head's `Q`, `K`, `V`, each `N x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInput {
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
}

impl HeadInput {
    pub fn new(q: DenseMatrix, k: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "Q {:?}, K {:?}, V {:?} must share one shape",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::Shape(format!(
                "sequence length and head dimension must be >= 1, got {:?}",
                q.shape()
            )));
        }
        Ok(Self { q, k, v })
    }

    pub fn q(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn k(&self) -> &DenseMatrix {
        &self.k
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    /// Sequence length.
    pub fn n(&self) -> usize {
        self.q.rows()
    }

    /// Head dimension.
    pub fn d(&self) -> usize {
        self.q.cols()
    }

    pub fn into_parts(self) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        (self.q, self.k, self.v)
    }
}

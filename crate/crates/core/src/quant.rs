//! Symmetric 4-bit quantization of `Q` and `K` and integer estimation of
//! attention-weight tiles.
//!
//! Codes live in `[-7, 7]`. `Q` carries one scale per token and `K` one scale
//! per key block, so every estimate in one `(query row, key block)` segment
//! shares a single positive scale: the largest estimate can be located on the
//! integer products and dequantized once.

use std::ops::Range;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::grid::BlockGrid;

pub const CODE_MAX: i8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// One scale per row.
    PerToken,
    /// One scale per run of `block` consecutive rows.
    PerKeyBlock { block: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
    grouping: Grouping,
}

fn scale_for(values: impl Iterator<Item = f32>) -> f32 {
    let max_abs = values.fold(0.0f32, |m, x| m.max(x.abs()));
    if max_abs == 0.0 {
        1.0
    } else {
        (max_abs as f64 / CODE_MAX as f64) as f32
    }
}

// Division in f64 is exact enough that round-to-nearest never lands on the
// wrong side of a half-step for f32 inputs.
fn encode(x: f32, scale: f32) -> i8 {
    let c = (x as f64 / scale as f64).round();
    c.clamp(-(CODE_MAX as f64), CODE_MAX as f64) as i8
}

/// Per-token quantization: `scale_r = max|Q[r, .]| / 7`, or 1 for a zero row.
pub fn quantize_q(q: &DenseMatrix) -> QuantizedMatrix {
    let mut codes = Vec::with_capacity(q.data().len());
    let mut scales = Vec::with_capacity(q.rows());
    for r in 0..q.rows() {
        let row = q.row(r);
        let s = scale_for(row.iter().copied());
        scales.push(s);
        codes.extend(row.iter().map(|&x| encode(x, s)));
    }
    QuantizedMatrix {
        rows: q.rows(),
        cols: q.cols(),
        codes,
        scales,
        grouping: Grouping::PerToken,
    }
}

/// Per-key-block quantization: one scale per `b_k x d` block.
pub fn quantize_k(k: &DenseMatrix, grid: &BlockGrid) -> QuantizedMatrix {
    let d = k.cols();
    let mut codes = Vec::with_capacity(k.data().len());
    let mut scales = Vec::with_capacity(grid.num_k_blocks());
    for j in 0..grid.num_k_blocks() {
        let rows = grid.k_range(j);
        let block = &k.data()[rows.start * d..rows.end * d];
        let s = scale_for(block.iter().copied());
        scales.push(s);
        codes.extend(block.iter().map(|&x| encode(x, s)));
    }
    QuantizedMatrix {
        rows: k.rows(),
        cols: d,
        codes,
        scales,
        grouping: Grouping::PerKeyBlock { block: grid.block_k() },
    }
}

impl QuantizedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn row_codes(&self, r: usize) -> &[i8] {
        &self.codes[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Scale applying to row `r`.
    pub fn row_scale(&self, r: usize) -> f32 {
        match self.grouping {
            Grouping::PerToken => self.scales[r],
            Grouping::PerKeyBlock { block } => self.scales[r / block],
        }
    }

    pub fn dequantize(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |r, c| {
            self.codes[r * self.cols + c] as f32 * self.row_scale(r)
        })
        .expect("codes and scales are finite")
    }

    /// Two codes per byte, low nibble first, two's complement in 4 bits.
    pub fn pack_nibbles(&self) -> Vec<u8> {
        self.codes
            .chunks(2)
            .map(|pair| {
                let lo = pair[0] as u8 & 0x0f;
                let hi = pair.get(1).map_or(0, |&c| c as u8 & 0x0f);
                lo | (hi << 4)
            })
            .collect()
    }

    pub fn unpack_nibbles(packed: &[u8], len: usize) -> Vec<i8> {
        let sext = |n: u8| ((n << 4) as i8) >> 4;
        packed
            .iter()
            .flat_map(|&b| [sext(b & 0x0f), sext(b >> 4)])
            .take(len)
            .collect()
    }
}

/// Integer products of one query block against one key block.
#[derive(Debug, Clone, PartialEq)]
pub struct IntWeightBlock {
    pub rows: usize,
    pub cols: usize,
    /// `rows x cols`, row-major.
    pub products: Vec<i32>,
    /// Per query row: `scale_q[r] * scale_k[j] / sqrt(d)`.
    pub row_scales: Vec<f64>,
}

impl IntWeightBlock {
    pub fn row(&self, r: usize) -> &[i32] {
        &self.products[r * self.cols..(r + 1) * self.cols]
    }

    /// Dequantized estimate of `q_r . k_c / sqrt(d)`.
    pub fn estimate(&self, r: usize, c: usize) -> f64 {
        self.products[r * self.cols + c] as f64 * self.row_scales[r]
    }
}

pub(crate) fn int_dot(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// Integer attention-weight estimate for query rows `q_rows` against key block
/// `j` of `k`.
pub fn approx_weight_block(
    q: &QuantizedMatrix,
    q_rows: Range<usize>,
    k: &QuantizedMatrix,
    grid: &BlockGrid,
    j: usize,
) -> IntWeightBlock {
    let k_rows = grid.k_range(j);
    let inv_sqrt_d = 1.0 / (q.cols as f64).sqrt();
    let k_scale = k.row_scale(k_rows.start) as f64;
    let mut products = Vec::with_capacity(q_rows.len() * k_rows.len());
    let mut row_scales = Vec::with_capacity(q_rows.len());
    for r in q_rows.clone() {
        let qc = q.row_codes(r);
        products.extend(k_rows.clone().map(|c| int_dot(qc, k.row_codes(c))));
        row_scales.push(q.row_scale(r) as f64 * k_scale * inv_sqrt_d);
    }
    IntWeightBlock {
        rows: q_rows.len(),
        cols: k_rows.len(),
        products,
        row_scales,
    }
}

/// Locates the largest integer in a shared-scale segment and dequantizes only
/// that entry. Ties go to the lowest column.
pub fn max_then_dequantize(segment: &[i32], scale: f64) -> Result<(f64, usize)> {
    if segment.is_empty() {
        return Err(Error::Domain("empty segment".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("segment scale must be positive and finite, got {scale}")));
    }
    let mut best = 0;
    for (c, &x) in segment.iter().enumerate().skip(1) {
        if x > segment[best] {
            best = c;
        }
    }
    Ok((segment[best] as f64 * scale, best))
}

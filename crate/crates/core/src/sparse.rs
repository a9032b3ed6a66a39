//! Exact attention restricted to selected blocks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::dot;
use crate::dense::{DenseMatrix, HeadInput};
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::mask::BlockMask;
use crate::softmax::OnlineSoftmax;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseAttentionOutput {
    pub output: DenseMatrix,
    /// Number of key tokens each query row attended to.
    pub coverage: Vec<usize>,
}

/// Streaming-softmax attention over the tokens of selected blocks, with the
/// causal mask applied inside overlapping blocks.
///
/// Key blocks are visited in ascending order. Bits set on `FullyFuture` tiles
/// are ignored.
pub fn block_sparse_attention(input: &HeadInput, mask: &BlockMask, grid: &BlockGrid) -> Result<SparseAttentionOutput> {
    if grid.n() != input.n() {
        return Err(Error::Shape(format!(
            "grid covers {} tokens, input has {}",
            grid.n(),
            input.n()
        )));
    }
    mask.check_grid(grid)?;
    let (n, d) = (input.n(), input.d());
    let scale = 1.0 / (d as f64).sqrt();
    let (q, k, v) = (input.q(), input.k(), input.v());

    let mut out = vec![0.0f32; n * d];
    let mut coverage = vec![0usize; n];
    out.par_chunks_mut(d)
        .zip(coverage.par_iter_mut())
        .enumerate()
        .try_for_each(|(r, (out_row, cov))| {
            let i = r / grid.block_q();
            let qr = q.row(r);
            let mut stats = OnlineSoftmax::default();
            let mut acc = vec![0.0f64; d];
            let mut logits = Vec::with_capacity(grid.block_k());
            for j in 0..grid.causal_k_blocks(i) {
                if !mask.get(i, j) {
                    continue;
                }
                let keys = grid.k_range(j);
                let keys = keys.start..keys.end.min(r + 1);
                if keys.is_empty() {
                    continue;
                }
                logits.clear();
                logits.extend(keys.clone().map(|c| dot(qr, k.row(c)) * scale));
                let rescale = stats.absorb(&logits);
                for a in acc.iter_mut() {
                    *a *= rescale;
                }
                for (c, &s) in keys.zip(&logits) {
                    let w = (s - stats.max).exp();
                    for (a, &x) in acc.iter_mut().zip(v.row(c)) {
                        *a += w * x as f64;
                    }
                }
                *cov += logits.len();
            }
            if *cov == 0 {
                return Err(Error::Domain(format!("query row {r} has no attendable key tokens")));
            }
            for (o, a) in out_row.iter_mut().zip(&acc) {
                *o = (a / stats.sum) as f32;
            }
            Ok(())
        })?;
    Ok(SparseAttentionOutput {
        output: DenseMatrix::new(n, d, out)?,
        coverage,
    })
}

/// Tile counts over the causal region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockAccounting {
    pub computed: usize,
    pub skipped: usize,
    pub total: usize,
    /// `skipped / total`.
    pub sparsity: f64,
}

impl BlockAccounting {
    pub fn merge(self, other: BlockAccounting) -> BlockAccounting {
        let computed = self.computed + other.computed;
        let total = self.total + other.total;
        BlockAccounting {
            computed,
            skipped: total - computed,
            total,
            sparsity: ratio(total - computed, total),
        }
    }

    pub fn empty() -> Self {
        Self {
            computed: 0,
            skipped: 0,
            total: 0,
            sparsity: 0.0,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn flop_accounting(mask: &BlockMask, grid: &BlockGrid) -> Result<BlockAccounting> {
    mask.check_grid(grid)?;
    let total = grid.total_causal_blocks();
    let computed = (0..grid.num_q_blocks())
        .map(|i| mask.row(i)[..grid.causal_k_blocks(i)].iter().filter(|&&b| b).count())
        .sum::<usize>();
    Ok(BlockAccounting {
        computed,
        skipped: total - computed,
        total,
        sparsity: ratio(total - computed, total),
    })
}

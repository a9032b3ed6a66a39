//! Block partitioning of the token axis and causal classification of
//! `(query block, key block)` tiles.

use std::ops::Range;

use crate::error::{Error, Result};

/// Splits `[0, n)` into contiguous ranges of `block` tokens; the last range
/// holds the ragged tail.
pub fn block_partition(n: usize, block: usize) -> Vec<Range<usize>> {
    assert!(block >= 1, "block size must be >= 1");
    (0..n.div_ceil(block))
        .map(|b| b * block..((b + 1) * block).min(n))
        .collect()
}

/// Query/key block geometry for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    n: usize,
    block_q: usize,
    block_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalClass {
    /// Every key token precedes every query token.
    FullyPast,
    /// Straddles the causal diagonal.
    Overlapping,
    /// Every key token follows every query token.
    FullyFuture,
}

impl BlockGrid {
    pub fn new(n: usize, block_q: usize, block_k: usize) -> Result<Self> {
        if n == 0 || block_q == 0 || block_k == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid needs n, b_q, b_k >= 1 (got {n}, {block_q}, {block_k})"
            )));
        }
        Ok(Self { n, block_q, block_k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn block_q(&self) -> usize {
        self.block_q
    }

    pub fn block_k(&self) -> usize {
        self.block_k
    }

    pub fn num_q_blocks(&self) -> usize {
        self.n.div_ceil(self.block_q)
    }

    pub fn num_k_blocks(&self) -> usize {
        self.n.div_ceil(self.block_k)
    }

    pub fn q_range(&self, i: usize) -> Range<usize> {
        i * self.block_q..((i + 1) * self.block_q).min(self.n)
    }

    pub fn k_range(&self, j: usize) -> Range<usize> {
        j * self.block_k..((j + 1) * self.block_k).min(self.n)
    }

    /// Key block containing the last token of query block `i`.
    pub fn frontier(&self, i: usize) -> usize {
        (self.q_range(i).end - 1) / self.block_k
    }

    /// First key block that is not fully in the past of query block `i`.
    pub fn first_overlapping(&self, i: usize) -> usize {
        self.q_range(i).start / self.block_k
    }

    /// Number of key blocks that are not `FullyFuture` for query block `i`.
    pub fn causal_k_blocks(&self, i: usize) -> usize {
        self.frontier(i) + 1
    }

    /// Total number of `FullyPast` plus `Overlapping` tiles.
    pub fn total_causal_blocks(&self) -> usize {
        (0..self.num_q_blocks()).map(|i| self.causal_k_blocks(i)).sum()
    }
}

pub fn causal_block_class(i: usize, j: usize, grid: &BlockGrid) -> CausalClass {
    let q = grid.q_range(i);
    let k = grid.k_range(j);
    if k.end - 1 < q.start {
        CausalClass::FullyPast
    } else if k.start > q.end - 1 {
        CausalClass::FullyFuture
    } else {
        CausalClass::Overlapping
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(n: usize, b: usize) -> Vec<usize> {
        block_partition(n, b).iter().map(|r| r.len()).collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(sizes(64, 32), vec![32, 32]);
        assert_eq!(sizes(70, 32), vec![32, 32, 6]);
        assert_eq!(sizes(1, 64), vec![1]);
    }

    #[test]
    fn class_examples() {
        let g = BlockGrid::new(256, 64, 32).unwrap();
        assert_eq!(causal_block_class(1, 0, &g), CausalClass::FullyPast);
        assert_eq!(causal_block_class(1, 2, &g), CausalClass::Overlapping);
        assert_eq!(causal_block_class(0, 3, &g), CausalClass::FullyFuture);
    }

    #[test]
    fn grid_rejects_zero() {
        assert!(BlockGrid::new(0, 1, 1).is_err());
        assert!(BlockGrid::new(1, 0, 1).is_err());
        assert!(BlockGrid::new(1, 1, 0).is_err());
    }

    #[test]
    fn frontier_matches_classification() {
        for (n, bq, bk) in [(70, 64, 32), (100, 7, 13), (5, 64, 32), (257, 48, 64)] {
            let g = BlockGrid::new(n, bq, bk).unwrap();
            for i in 0..g.num_q_blocks() {
                for j in 0..g.num_k_blocks() {
                    let class = causal_block_class(i, j, &g);
                    assert_eq!(class == CausalClass::FullyFuture, j > g.frontier(i));
                    assert_eq!(class == CausalClass::FullyPast, j < g.first_overlapping(i));
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn partition_covers_exactly_once(n in 1usize..5000, b in 1usize..300) {
            let parts = block_partition(n, b);
            let mut next = 0;
            for r in &parts {
                proptest::prop_assert_eq!(r.start, next);
                proptest::prop_assert!(!r.is_empty() && r.len() <= b);
                next = r.end;
            }
            proptest::prop_assert_eq!(next, n);
            proptest::prop_assert!((parts.len() - 1) * b < n && n <= parts.len() * b);
        }
    }
}

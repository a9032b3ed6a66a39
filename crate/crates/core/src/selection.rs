//! Block selection from 4-bit attention-weight estimates.
//!
//! For each query block the key axis is split into three regions:
//!
//! ```text
//!  key blocks: [ sink | middle ........................ | local ]
//!               0..s    s..l                              l..=frontier
//! ```
//!
//! Sink and local blocks are always selected and supply exact softmax
//! statistics `(m, l)` per query row. A middle block is kept when some row `r`
//! has an estimate `S~` with `exp(S~ - m_r) / l_r >= tau`, evaluated as the
//! single comparison `S~ >= m_r + ln(tau * l_r)`. Middle decisions are then
//! OR-ed over segments of `segment_size` consecutive blocks; a trailing
//! partial segment next to the local area is always kept.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::dot;
use crate::dense::HeadInput;
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::mask::BlockMask;
use crate::quant::{approx_weight_block, max_then_dequantize, Grouping, QuantizedMatrix};
use crate::softmax::OnlineSoftmax;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub tau: f64,
    pub sink_tokens: usize,
    pub local_tokens_min: usize,
    pub segment_size: usize,
    pub block_q: usize,
    pub block_k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: 0.004,
            sink_tokens: 32,
            local_tokens_min: 128,
            segment_size: 4,
            block_q: 64,
            block_k: 32,
        }
    }
}

impl SelectionConfig {
    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.block_q == 0 || self.block_k == 0 {
            return bad("block sizes must be >= 1".into());
        }
        if self.sink_tokens == 0 {
            return bad("sink_tokens must be >= 1".into());
        }
        if self.local_tokens_min < self.block_k {
            return bad(format!(
                "local_tokens_min ({}) must be >= block_k ({})",
                self.local_tokens_min, self.block_k
            ));
        }
        if self.segment_size == 0 {
            return bad("segment_size must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid(&self, n: usize) -> Result<BlockGrid> {
        BlockGrid::new(n, self.block_q, self.block_k)
    }
}

/// Key-block regions of one query block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    /// Sink blocks are `0..sink_end`.
    pub sink_end: usize,
    /// Blocks scored from estimates.
    pub middle: Range<usize>,
    /// Trailing window ending at the causal frontier, inclusive of every
    /// overlapping block.
    pub local: Range<usize>,
}

impl RowLayout {
    pub fn sink_local(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.sink_end).chain(self.local.clone())
    }
}

pub fn row_layout(i: usize, grid: &BlockGrid, cfg: &SelectionConfig) -> RowLayout {
    let causal = grid.causal_k_blocks(i);
    let sink_end = cfg.sink_tokens.div_ceil(grid.block_k()).min(causal);
    let past_local = cfg.local_tokens_min.div_ceil(grid.block_k());
    let local_start = grid.first_overlapping(i).saturating_sub(past_local).max(sink_end);
    RowLayout {
        sink_end,
        middle: sink_end..local_start,
        local: local_start..causal,
    }
}

/// Ascending key-block indices of the sink-local region of query block `i`.
pub fn sink_local_index_set(i: usize, grid: &BlockGrid, cfg: &SelectionConfig) -> Vec<usize> {
    row_layout(i, grid, cfg).sink_local().collect()
}

/// Exact per-row `max` and `sum exp(S - max)` over sink-local keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkLocalStats {
    pub max: Vec<f64>,
    pub sum: Vec<f64>,
}

impl SinkLocalStats {
    pub fn len(&self) -> usize {
        self.max.len()
    }

    pub fn is_empty(&self) -> bool {
        self.max.is_empty()
    }
}

/// Streams the exact logits of query rows `q_rows` against `blocks` through
/// the online max/exp-sum update. No intra-block causal mask is applied.
pub fn compute_sink_local_stats(
    input: &HeadInput,
    q_rows: Range<usize>,
    blocks: &[usize],
    grid: &BlockGrid,
) -> Result<SinkLocalStats> {
    if blocks.is_empty() {
        return Err(Error::Domain("sink-local block set is empty".into()));
    }
    let scale = 1.0 / (input.d() as f64).sqrt();
    let (q, k) = (input.q(), input.k());
    let mut max = Vec::with_capacity(q_rows.len());
    let mut sum = Vec::with_capacity(q_rows.len());
    let mut logits = Vec::new();
    for r in q_rows {
        let mut acc = OnlineSoftmax::default();
        for &j in blocks {
            logits.clear();
            logits.extend(grid.k_range(j).map(|c| dot(q.row(r), k.row(c)) * scale));
            acc.absorb(&logits);
        }
        max.push(acc.max);
        sum.push(acc.sum);
    }
    Ok(SinkLocalStats { max, sum })
}

/// `m + ln(tau * l)`, with `tau * l` clamped to the smallest positive normal.
pub fn threshold_bound_scalar(tau: f64, max: f64, sum: f64) -> f64 {
    max + (tau * sum).max(f64::MIN_POSITIVE).ln()
}

pub fn threshold_bound(tau: f64, stats: &SinkLocalStats) -> Vec<f64> {
    stats
        .max
        .iter()
        .zip(&stats.sum)
        .map(|(&m, &l)| threshold_bound_scalar(tau, m, l))
        .collect()
}

/// `exp(S~ - m) / l`. Reference form of the threshold test; the selection
/// pass itself compares against [`threshold_bound`].
pub fn relative_attention_score(estimate: f64, max: f64, sum: f64) -> f64 {
    (estimate - max).exp() / sum
}

/// ORs `raw` middle-region decisions over consecutive runs of
/// `segment_size` blocks; a trailing run shorter than `segment_size` is kept
/// unconditionally.
pub fn segment_aggregate(raw: &[bool], segment_size: usize) -> Vec<bool> {
    assert!(segment_size >= 1, "segment_size must be >= 1");
    raw.chunks(segment_size)
        .flat_map(|seg| {
            let keep = seg.len() < segment_size || seg.iter().any(|&b| b);
            std::iter::repeat_n(keep, seg.len())
        })
        .collect()
}

fn check_quantized(input: &HeadInput, q: &QuantizedMatrix, k: &QuantizedMatrix, cfg: &SelectionConfig) -> Result<()> {
    let shape = (input.n(), input.d());
    if (q.rows(), q.cols()) != shape || (k.rows(), k.cols()) != shape {
        return Err(Error::Shape(format!(
            "quantized Q {:?} / K {:?} do not match input {:?}",
            (q.rows(), q.cols()),
            (k.rows(), k.cols()),
            shape
        )));
    }
    if q.grouping() != Grouping::PerToken {
        return Err(Error::Shape("quantized Q must use per-token scales".into()));
    }
    if k.grouping() != (Grouping::PerKeyBlock { block: cfg.block_k }) {
        return Err(Error::Shape(format!(
            "quantized K must use one scale per {}-token key block",
            cfg.block_k
        )));
    }
    Ok(())
}

fn middle_block_selected(
    q: &QuantizedMatrix,
    k: &QuantizedMatrix,
    grid: &BlockGrid,
    q_rows: Range<usize>,
    j: usize,
    bounds: &[f64],
) -> bool {
    let block = approx_weight_block(q, q_rows, k, grid, j);
    (0..block.rows).any(|r| {
        let (best, _) = max_then_dequantize(block.row(r), block.row_scales[r]).expect("key blocks are nonempty");
        best >= bounds[r]
    })
}

fn select_row(
    input: &HeadInput,
    q: &QuantizedMatrix,
    k: &QuantizedMatrix,
    grid: &BlockGrid,
    cfg: &SelectionConfig,
    i: usize,
) -> Result<Vec<bool>> {
    let layout = row_layout(i, grid, cfg);
    let mut row = vec![false; grid.num_k_blocks()];
    let sink_local: Vec<usize> = layout.sink_local().collect();
    for &j in &sink_local {
        row[j] = true;
    }
    if layout.middle.is_empty() {
        return Ok(row);
    }
    let q_rows = grid.q_range(i);
    let stats = compute_sink_local_stats(input, q_rows.clone(), &sink_local, grid)?;
    let bounds = threshold_bound(cfg.tau, &stats);
    let middle: Vec<usize> = layout.middle.collect();
    for seg in middle.chunks(cfg.segment_size) {
        // Short-circuits within a segment; equivalent to scoring every block
        // and calling `segment_aggregate`.
        let keep = seg.len() < cfg.segment_size
            || seg
                .iter()
                .any(|&j| middle_block_selected(q, k, grid, q_rows.clone(), j, &bounds));
        for &j in seg {
            row[j] = keep;
        }
    }
    Ok(row)
}

/// Builds the block mask for one head.
pub fn selection_pass(
    input: &HeadInput,
    q: &QuantizedMatrix,
    k: &QuantizedMatrix,
    cfg: &SelectionConfig,
) -> Result<BlockMask> {
    cfg.validate()?;
    check_quantized(input, q, k, cfg)?;
    let grid = cfg.grid(input.n())?;
    let rows = (0..grid.num_q_blocks())
        .into_par_iter()
        .map(|i| select_row(input, q, k, &grid, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut mask = BlockMask::for_grid(&grid);
    for (i, row) in rows.into_iter().enumerate() {
        mask.row_mut(i).copy_from_slice(&row);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseMatrix;
    use crate::quant::{quantize_k, quantize_q};

    fn cfg() -> SelectionConfig {
        SelectionConfig::default()
    }

    #[test]
    fn sink_local_examples() {
        let g = BlockGrid::new(512, 64, 32).unwrap();
        assert_eq!(sink_local_index_set(0, &g, &cfg()), vec![0, 1]);
        assert_eq!(sink_local_index_set(7, &g, &cfg()), vec![0, 10, 11, 12, 13, 14, 15]);
        let g = BlockGrid::new(64, 64, 32).unwrap();
        assert_eq!(sink_local_index_set(0, &g, &cfg()), vec![0, 1]);
    }

    #[test]
    fn layout_regions_tile_causal_range() {
        for (n, bq, bk, sink, local) in [(1000, 64, 32, 32, 128), (333, 16, 48, 100, 48), (77, 8, 8, 1, 8)] {
            let c = SelectionConfig { sink_tokens: sink, local_tokens_min: local, block_q: bq, block_k: bk, ..cfg() };
            let g = c.grid(n).unwrap();
            for i in 0..g.num_q_blocks() {
                let l = row_layout(i, &g, &c);
                assert_eq!(l.middle.start, l.sink_end);
                assert_eq!(l.local.start, l.middle.end);
                assert_eq!(l.local.end, g.causal_k_blocks(i));
                assert!(l.middle.is_empty() || l.middle.end <= g.first_overlapping(i));
            }
        }
    }

    #[test]
    fn stats_examples() {
        let one = |x: f32| DenseMatrix::new(1, 1, vec![x]).unwrap();
        let h = HeadInput::new(one(0.0), one(5.0), one(1.0)).unwrap();
        let g = BlockGrid::new(1, 1, 1).unwrap();
        let s = compute_sink_local_stats(&h, 0..1, &[0], &g).unwrap();
        assert_eq!((s.max[0], s.sum[0]), (0.0, 1.0));

        // q.k / sqrt(1) = 2 * 1.5 = 3 for every key.
        let q = DenseMatrix::new(4, 1, vec![2.0; 4]).unwrap();
        let k = DenseMatrix::new(4, 1, vec![1.5; 4]).unwrap();
        let h = HeadInput::new(q, k, DenseMatrix::zeros(4, 1)).unwrap();
        let g = BlockGrid::new(4, 4, 2).unwrap();
        let s = compute_sink_local_stats(&h, 0..4, &[0, 1], &g).unwrap();
        assert!(s.max.iter().all(|&m| m == 3.0));
        assert!(s.sum.iter().all(|&l| l == 4.0));
        assert!(compute_sink_local_stats(&h, 0..4, &[], &g).is_err());
    }

    #[test]
    fn bound_examples() {
        assert_eq!(threshold_bound_scalar(0.25, 1.5, 4.0), 1.5);
        let b = threshold_bound_scalar(0.004, 0.0, 10.0);
        assert!((b - (-3.2188758248682006)).abs() < 1e-12, "{b}");
        assert!(threshold_bound_scalar(1e-300, 0.0, 1e-300).is_finite());
    }

    #[test]
    fn score_examples() {
        assert_eq!(relative_attention_score(2.0, 2.0, 8.0), 0.125);
        assert_eq!(relative_attention_score(f64::NEG_INFINITY, 0.0, 1.0), 0.0);
    }

    #[test]
    fn segment_examples() {
        let raw = [true, false, false, false, false, false, false, false];
        assert_eq!(segment_aggregate(&raw, 1), raw.to_vec());
        assert_eq!(
            segment_aggregate(&raw, 4),
            vec![true, true, true, true, false, false, false, false]
        );
        assert_eq!(segment_aggregate(&[false; 6], 4), vec![false, false, false, false, true, true]);
        assert!(segment_aggregate(&[], 4).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(cfg().with_tau(0.0).validate().is_err());
        assert!(cfg().with_tau(1.0).validate().is_err());
        assert!(SelectionConfig { local_tokens_min: 16, ..cfg() }.validate().is_err());
        assert!(SelectionConfig { segment_size: 0, ..cfg() }.validate().is_err());
        assert!(SelectionConfig { sink_tokens: 0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn short_sequence_selects_every_causal_block() {
        let n = 160;
        let m = |o: usize| DenseMatrix::from_fn(n, 8, |r, c| (((r * 31 + c * 17 + o) % 13) as f32 - 6.0) * 0.4).unwrap();
        let h = HeadInput::new(m(0), m(5), m(9)).unwrap();
        let c = cfg();
        let g = c.grid(n).unwrap();
        let mask = selection_pass(&h, &quantize_q(h.q()), &quantize_k(h.k(), &g), &c).unwrap();
        assert_eq!(mask, BlockMask::all_causal(&g));
    }

    #[test]
    fn rejects_mismatched_quantization() {
        let h = HeadInput::new(DenseMatrix::zeros(8, 2), DenseMatrix::zeros(8, 2), DenseMatrix::zeros(8, 2)).unwrap();
        let c = cfg();
        let g = c.grid(8).unwrap();
        let qq = quantize_q(h.q());
        let kk = quantize_k(h.k(), &g);
        assert!(selection_pass(&h, &kk, &kk, &c).is_err());
        assert!(selection_pass(&h, &qq, &qq, &c).is_err());
        let other = quantize_k(h.k(), &BlockGrid::new(8, 64, 16).unwrap());
        assert!(selection_pass(&h, &qq, &other, &c).is_err());
        assert!(selection_pass(&h, &qq, &kk, &c).is_ok());
    }
}

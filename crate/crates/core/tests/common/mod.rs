//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls the library's attention, selection or sparse kernels;
//! the oracles only read inputs (dense matrices, quantized codes and scales,
//! configuration values).
#![allow(dead_code, clippy::needless_range_loop)]

use blocksparse_core::quant::QuantizedMatrix;
use blocksparse_core::{DenseMatrix, HeadInput, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f32, _>(StandardNormal)).unwrap()
}

pub fn gaussian_head(seed: u64, n: usize, d: usize) -> HeadInput {
    let mut r = rng(seed);
    HeadInput::new(gaussian(&mut r, n, d, 1.0), gaussian(&mut r, n, d, 1.0), gaussian(&mut r, n, d, 1.0)).unwrap()
}

pub fn logit(h: &HeadInput, i: usize, j: usize) -> f64 {
    let s: f64 = h.q().row(i).iter().zip(h.k().row(j)).map(|(&a, &b)| a as f64 * b as f64).sum();
    s / (h.d() as f64).sqrt()
}

/// Row-wise attention over an explicit key set, materializing every logit.
fn attend(h: &HeadInput, i: usize, keys: &[usize]) -> Vec<f64> {
    let logits: Vec<f64> = keys.iter().map(|&j| logit(h, i, j)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..h.d())
        .map(|c| keys.iter().zip(&w).map(|(&j, wj)| wj * h.v().get(j, c) as f64).sum::<f64>() / z)
        .collect()
}

/// Dense causal attention in f64, as `f64` rows.
pub fn dense_oracle(h: &HeadInput) -> Vec<Vec<f64>> {
    (0..h.n()).map(|i| attend(h, i, &(0..=i).collect::<Vec<_>>())).collect()
}

/// Block indices from token geometry.
pub fn block_of(token: usize, block: usize) -> usize {
    token / block
}

/// Dense softmax with logits set to -inf outside selected, causal tokens.
pub fn masked_oracle(h: &HeadInput, bits: &[bool], n_k: usize, bq: usize, bk: usize) -> Vec<Vec<f64>> {
    (0..h.n())
        .map(|i| {
            let keys: Vec<usize> = (0..=i).filter(|&j| bits[block_of(i, bq) * n_k + block_of(j, bk)]).collect();
            attend(h, i, &keys)
        })
        .collect()
}

pub fn max_abs_vs(out: &DenseMatrix, oracle: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in oracle.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            worst = worst.max((out.get(i, c) as f64 - x).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tri {
    Yes,
    No,
    Tie,
}

/// Per-query-block region classification, derived by enumerating tokens.
pub struct OracleLayout {
    pub sink_local: Vec<usize>,
    pub middle: Vec<usize>,
    pub causal: usize,
}

pub fn oracle_layout(n: usize, cfg: &SelectionConfig, i: usize) -> OracleLayout {
    let (bq, bk) = (cfg.block_q, cfg.block_k);
    let q_first = i * bq;
    let q_last = ((i + 1) * bq).min(n) - 1;
    let n_k = n.div_ceil(bk);
    let first = |j: usize| j * bk;
    let last = |j: usize| ((j + 1) * bk).min(n) - 1;
    let causal: Vec<usize> = (0..n_k).filter(|&j| first(j) <= q_last).collect();
    let overlapping: Vec<usize> = causal.iter().copied().filter(|&j| last(j) >= q_first).collect();
    let past: Vec<usize> = causal.iter().copied().filter(|&j| last(j) < q_first).collect();
    // Smallest number of trailing past blocks covering local_tokens_min tokens.
    let mut window = Vec::new();
    let mut covered = 0;
    for &j in past.iter().rev() {
        if covered >= cfg.local_tokens_min {
            break;
        }
        window.push(j);
        covered += last(j) - first(j) + 1;
    }
    let sink: Vec<usize> = causal.iter().copied().filter(|&j| first(j) < cfg.sink_tokens).collect();
    let mut sl: Vec<usize> = sink.iter().chain(&window).chain(&overlapping).copied().collect();
    sl.sort_unstable();
    sl.dedup();
    let middle = causal.iter().copied().filter(|j| !sl.contains(j)).collect();
    OracleLayout {
        sink_local: sl,
        middle,
        causal: causal.len(),
    }
}

/// Full-materialization selection oracle.
///
/// Exact sink-local `m`, `l` from all logits at once; every estimate
/// `S~ = (sum of code products) * s_q * s_k / sqrt(d)` is computed; each is
/// tested with `exp(S~ - m) / l >= tau`, where values within `eps` of the
/// threshold in log domain are ties. Middle blocks are OR-ed over runs of
/// `segment_size` starting at the first middle block; a short final run is
/// kept.
pub fn selection_oracle(h: &HeadInput, q: &QuantizedMatrix, k: &QuantizedMatrix, cfg: &SelectionConfig, eps: f64) -> Vec<Vec<Tri>> {
    let n = h.n();
    let d = h.d();
    let (bq, bk) = (cfg.block_q, cfg.block_k);
    let n_q = n.div_ceil(bq);
    let n_k = n.div_ceil(bk);
    let mut out = vec![vec![Tri::No; n_k]; n_q];
    for i in 0..n_q {
        let lay = oracle_layout(n, cfg, i);
        for &j in &lay.sink_local {
            out[i][j] = Tri::Yes;
        }
        if lay.middle.is_empty() {
            continue;
        }
        let rows: Vec<usize> = (i * bq..((i + 1) * bq).min(n)).collect();
        let sl_tokens: Vec<usize> = lay
            .sink_local
            .iter()
            .flat_map(|&j| j * bk..((j + 1) * bk).min(n))
            .collect();
        // Exact (m, l) per row from all sink-local logits at once.
        let stats: Vec<(f64, f64)> = rows
            .iter()
            .map(|&r| {
                let s: Vec<f64> = sl_tokens.iter().map(|&t| logit(h, r, t)).collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (m, s.iter().map(|x| (x - m).exp()).sum())
            })
            .collect();
        let mut raw = Vec::new();
        for &j in &lay.middle {
            let mut decision = Tri::No;
            'rows: for (&r, &(m, l)) in rows.iter().zip(&stats) {
                for c in j * bk..((j + 1) * bk).min(n) {
                    let ints: i64 = q.row_codes(r).iter().zip(k.row_codes(c)).map(|(&a, &b)| a as i64 * b as i64).sum();
                    let est = ints as f64 * q.row_scale(r) as f64 * k.row_scale(c) as f64 / (d as f64).sqrt();
                    let p = (est - m).exp() / l;
                    if (p.ln() - cfg.tau.ln()).abs() <= eps {
                        decision = Tri::Tie;
                    } else if p >= cfg.tau {
                        decision = Tri::Yes;
                        break 'rows;
                    }
                }
            }
            raw.push(decision);
        }
        for (seg_idx, seg) in raw.chunks(cfg.segment_size).enumerate() {
            let v = if seg.len() < cfg.segment_size || seg.contains(&Tri::Yes) {
                Tri::Yes
            } else if seg.contains(&Tri::Tie) {
                Tri::Tie
            } else {
                Tri::No
            };
            for t in 0..seg.len() {
                out[i][lay.middle[seg_idx * cfg.segment_size + t]] = v;
            }
        }
    }
    out
}

/// Compares an implementation mask to the oracle; returns
/// `(mismatches, ties skipped)`.
pub fn compare_mask(mask: &blocksparse_core::BlockMask, oracle: &[Vec<Tri>]) -> (usize, usize) {
    let mut mismatches = 0;
    let mut ties = 0;
    for (i, row) in oracle.iter().enumerate() {
        for (j, &t) in row.iter().enumerate() {
            match t {
                Tri::Tie => ties += 1,
                Tri::Yes if !mask.get(i, j) => mismatches += 1,
                Tri::No if mask.get(i, j) => mismatches += 1,
                _ => {}
            }
        }
    }
    (mismatches, ties)
}

/// Causal tile count and selected causal tiles, by enumeration.
pub fn count_blocks(bits: &[bool], n: usize, bq: usize, bk: usize) -> (usize, usize) {
    let n_k = n.div_ceil(bk);
    let mut total = 0;
    let mut selected = 0;
    for i in 0..n.div_ceil(bq) {
        let q_last = ((i + 1) * bq).min(n) - 1;
        for j in 0..n_k {
            if j * bk <= q_last {
                total += 1;
                if bits[i * n_k + j] {
                    selected += 1;
                }
            }
        }
    }
    (total, selected)
}

/// L1 error `sum |O - O~| / N` between two f64 row sets.
pub fn l1_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let s: f64 = a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).sum();
    s / a.len() as f64
}

pub fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&x| x as f64).collect()).collect()
}

/// Oracle mask bits with ties resolved to "selected" (the `>=` rule).
pub fn oracle_bits(h: &HeadInput, cfg: &SelectionConfig) -> Vec<bool> {
    let grid = cfg.grid(h.n()).unwrap();
    let q = blocksparse_core::quantize_q(h.q());
    let k = blocksparse_core::quantize_k(h.k(), &grid);
    selection_oracle(h, &q, &k, cfg, 0.0).into_iter().flatten().map(|t| t != Tri::No).collect()
}

/// Err(tau) computed entirely by oracles: oracle mask, masked f64 softmax,
/// dense f64 softmax, L1 over N.
pub fn oracle_err(h: &HeadInput, dense: &[Vec<f64>], cfg: &SelectionConfig) -> f64 {
    let bits = oracle_bits(h, cfg);
    let sparse = masked_oracle(h, &bits, h.n().div_ceil(cfg.block_k), cfg.block_q, cfg.block_k);
    l1_oracle(dense, &sparse)
}

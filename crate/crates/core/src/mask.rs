//! Block-level sparse mask and its run-length-encoded dump file.
//!
//! # Dump layout
//!
//! All integers little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"BSMK"
//! 4       4     u32    version (= 1)
//! 8       4     u32    record count R
//! then R records:
//!         4     u32    head index
//!         4     u32    N (tokens)
//!         4     u32    b_q
//!         4     u32    b_k
//!         4     u32    N_q
//!         4     u32    N_k
//!         8     f64    tau
//!         4     u32    run count C
//!         4*C   u32    run lengths
//! ```
//!
//! Runs cover the `N_q x N_k` grid in row-major order, alternating
//! false/true and starting with a false run (which may have length 0). The
//! run lengths sum to `N_q * N_k`, with `N_q = ceil(N / b_q)` and
//! `N_k = ceil(N / b_k)`. Tiles entirely above the causal diagonal must be
//! unset; the reader rejects records that violate any of this.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{causal_block_class, BlockGrid, CausalClass};

/// `N_q x N_k` grid of "compute this tile" flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    n_q: usize,
    n_k: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new(n_q: usize, n_k: usize) -> Self {
        Self {
            n_q,
            n_k,
            bits: vec![false; n_q * n_k],
        }
    }

    pub fn for_grid(grid: &BlockGrid) -> Self {
        Self::new(grid.num_q_blocks(), grid.num_k_blocks())
    }

    /// Every causal tile selected.
    pub fn all_causal(grid: &BlockGrid) -> Self {
        let mut m = Self::for_grid(grid);
        for i in 0..m.n_q {
            for j in 0..grid.causal_k_blocks(i) {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn from_bits(n_q: usize, n_k: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n_q * n_k {
            return Err(Error::Shape(format!(
                "{n_q}x{n_k} mask needs {} bits, got {}",
                n_q * n_k,
                bits.len()
            )));
        }
        Ok(Self { n_q, n_k, bits })
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n_k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.n_k + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n_k..(i + 1) * self.n_k]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [bool] {
        &mut self.bits[i * self.n_k..(i + 1) * self.n_k]
    }

    pub fn count_selected(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn check_grid(&self, grid: &BlockGrid) -> Result<()> {
        if (self.n_q, self.n_k) != (grid.num_q_blocks(), grid.num_k_blocks()) {
            return Err(Error::Shape(format!(
                "mask is {}x{}, grid is {}x{}",
                self.n_q,
                self.n_k,
                grid.num_q_blocks(),
                grid.num_k_blocks()
            )));
        }
        Ok(())
    }

    /// True iff no `FullyFuture` tile is selected.
    pub fn is_causal(&self, grid: &BlockGrid) -> bool {
        (0..self.n_q).all(|i| {
            (0..self.n_k).all(|j| !self.get(i, j) || causal_block_class(i, j, grid) != CausalClass::FullyFuture)
        })
    }

    /// Setwise `self ⊇ other`.
    pub fn is_superset_of(&self, other: &BlockMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// Row-major run lengths, alternating false/true, starting with false.
    pub fn runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(n_q: usize, n_k: usize, runs: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(n_q * n_k);
        for (idx, &len) in runs.iter().enumerate() {
            if bits.len() + len as usize > n_q * n_k {
                return Err(Error::Shape(format!("run lengths exceed the {n_q}x{n_k} grid")));
            }
            bits.extend(std::iter::repeat_n(idx % 2 == 1, len as usize));
        }
        Self::from_bits(n_q, n_k, bits)
    }
}

pub const MASK_MAGIC: [u8; 4] = *b"BSMK";
pub const MASK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub head: u32,
    pub n_tokens: u32,
    pub block_q: u32,
    pub block_k: u32,
    pub tau: f64,
    pub mask: BlockMask,
}

fn u32_of(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::InvalidParameter(format!("{what} {x} does not fit in u32")))
}

pub fn encode_mask_dump(records: &[MaskRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MASK_MAGIC);
    buf.extend_from_slice(&MASK_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of(records.len(), "record count")?.to_le_bytes());
    for rec in records {
        let runs = rec.mask.runs();
        for x in [
            rec.head,
            rec.n_tokens,
            rec.block_q,
            rec.block_k,
            u32_of(rec.mask.n_q(), "N_q")?,
            u32_of(rec.mask.n_k(), "N_k")?,
        ] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&rec.tau.to_le_bytes());
        buf.extend_from_slice(&u32_of(runs.len(), "run count")?.to_le_bytes());
        for r in runs {
            buf.extend_from_slice(&r.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_mask_dump(buf: &[u8]) -> Result<Vec<MaskRecord>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != MASK_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected \"BSMK\"".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != MASK_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let start = cur.pos as u64;
        let head = cur.u32("head")?;
        let n_tokens = cur.u32("N")?;
        let block_q = cur.u32("b_q")?;
        let block_k = cur.u32("b_k")?;
        let n_q = cur.u32("N_q")? as usize;
        let n_k = cur.u32("N_k")? as usize;
        let tau = cur.f64("tau")?;
        let n_runs = cur.u32("run count")? as usize;
        let mut runs = Vec::with_capacity(n_runs.min(1 << 20));
        for _ in 0..n_runs {
            runs.push(cur.u32("run length")?);
        }
        let bad = |reason: String| Error::Format { offset: start, reason };
        let grid = BlockGrid::new(n_tokens as usize, block_q as usize, block_k as usize)
            .map_err(|e| bad(format!("invalid record geometry: {e}")))?;
        if (n_q, n_k) != (grid.num_q_blocks(), grid.num_k_blocks()) {
            return Err(bad(format!(
                "grid {n_q} x {n_k} does not match N={n_tokens}, b_q={block_q}, b_k={block_k}"
            )));
        }
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (n_q * n_k) as u64 {
            return Err(bad(format!("runs cover {total} cells, grid has {}", n_q * n_k)));
        }
        let mask = BlockMask::from_runs(n_q, n_k, &runs)?;
        if !mask.is_causal(&grid) {
            return Err(bad("record selects tiles above the causal diagonal".into()));
        }
        records.push(MaskRecord {
            head,
            n_tokens,
            block_q,
            block_k,
            tau,
            mask,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            reason: "trailing bytes after last record".into(),
        });
    }
    Ok(records)
}

pub fn write_mask_dump(path: impl AsRef<Path>, records: &[MaskRecord]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_mask_dump(records)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_mask_dump(path: impl AsRef<Path>) -> Result<Vec<MaskRecord>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_mask_dump(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn runs_start_with_false() {
        let m = BlockMask::from_bits(1, 4, vec![true, true, false, true]).unwrap();
        assert_eq!(m.runs(), vec![0, 2, 1, 1]);
        let m = BlockMask::new(2, 2);
        assert_eq!(m.runs(), vec![4]);
    }

    #[test]
    fn exact_bytes_for_small_record() {
        let rec = MaskRecord {
            head: 3,
            n_tokens: 64,
            block_q: 64,
            block_k: 32,
            tau: 0.5,
            mask: BlockMask::from_bits(1, 2, vec![true, true]).unwrap(),
        };
        let bytes = encode_mask_dump(&[rec]).unwrap();
        let mut expect = b"BSMK".to_vec();
        for x in [1u32, 1, 3, 64, 64, 32, 1, 2] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        expect.extend_from_slice(&0.5f64.to_le_bytes());
        for x in [2u32, 0, 2] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let rec = MaskRecord {
            head: 0,
            n_tokens: 1,
            block_q: 1,
            block_k: 1,
            tau: 0.1,
            mask: BlockMask::from_bits(1, 1, vec![true]).unwrap(),
        };
        let good = encode_mask_dump(&[rec]).unwrap();
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode_mask_dump(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            decode_mask_dump(&good[..good.len() - 2]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_records() {
        let rec = |n_tokens, bits: Vec<bool>| MaskRecord {
            head: 0,
            n_tokens,
            block_q: 2,
            block_k: 2,
            tau: 0.1,
            mask: BlockMask::from_bits(2, 2, bits).unwrap(),
        };
        let ok = encode_mask_dump(&[rec(4, vec![true, false, true, true])]).unwrap();
        assert!(decode_mask_dump(&ok).is_ok());
        // Tile (0, 1) lies above the diagonal.
        let future = encode_mask_dump(&[rec(4, vec![true, true, true, true])]).unwrap();
        assert!(matches!(decode_mask_dump(&future), Err(Error::Format { offset: 12, .. })));
        // N = 6 needs a 3 x 3 grid.
        let wrong = encode_mask_dump(&[rec(6, vec![true, false, true, true])]).unwrap();
        assert!(matches!(decode_mask_dump(&wrong), Err(Error::Format { offset: 12, .. })));
    }

    proptest! {
        #[test]
        fn dump_round_trip(n in 1usize..300, bq in 1usize..70, bk in 1usize..70, seed in any::<u64>(), tau in 1e-9f64..1.0) {
            let grid = BlockGrid::new(n, bq, bk).unwrap();
            let mut mask = BlockMask::for_grid(&grid);
            for i in 0..grid.num_q_blocks() {
                for j in 0..grid.causal_k_blocks(i) {
                    mask.set(i, j, (seed >> ((i * 7 + j) % 64)) & 1 == 1);
                }
            }
            let rec = MaskRecord { head: 7, n_tokens: n as u32, block_q: bq as u32, block_k: bk as u32, tau, mask };
            let back = decode_mask_dump(&encode_mask_dump(std::slice::from_ref(&rec)).unwrap()).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }
    }
}

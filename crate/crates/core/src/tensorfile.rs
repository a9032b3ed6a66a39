//! Versioned little-endian container for per-head `Q`, `K`, `V`.
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"BSQK"
//! 4       4     u32    version (= 1)
//! 8       4     u32    dtype tag (0 = f32)
//! 12      4     u32    N (sequence length)
//! 16      4     u32    d (head dimension)
//! 20      4     u32    head count H
//! 24      ...   f32    payload
//! ```
//!
//! The payload holds, for each head in order, `Q` then `K` then `V`, each
//! `N x d` row-major: `3 * H * N * d` values, `12 * H * N * d` bytes. The file
//! ends exactly after the payload.

use std::path::Path;

use crate::dense::{DenseMatrix, HeadInput};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"BSQK";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHeader {
    pub n: u32,
    pub d: u32,
    pub heads: u32,
}

impl TensorHeader {
    pub fn payload_bytes(&self) -> u64 {
        12 * self.heads as u64 * self.n as u64 * self.d as u64
    }
}

fn fmt_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn u32_at(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

pub fn encode_tensors(inputs: &[HeadInput]) -> Result<Vec<u8>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidParameter("tensor file needs at least one head".into()))?;
    let (n, d) = (first.n(), first.d());
    if let Some(h) = inputs.iter().position(|h| (h.n(), h.d()) != (n, d)) {
        return Err(Error::Shape(format!(
            "head {h} is {}x{}, head 0 is {n}x{d}",
            inputs[h].n(),
            inputs[h].d()
        )));
    }
    let to_u32 = |x: usize, what: &str| {
        u32::try_from(x).map_err(|_| Error::InvalidParameter(format!("{what} {x} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 12 * inputs.len() * n * d);
    buf.extend_from_slice(&TENSOR_MAGIC);
    for x in [
        TENSOR_VERSION,
        DTYPE_F32,
        to_u32(n, "N")?,
        to_u32(d, "d")?,
        to_u32(inputs.len(), "head count")?,
    ] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for h in inputs {
        for m in [h.q(), h.k(), h.v()] {
            for x in m.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn decode_header(buf: &[u8]) -> Result<TensorHeader> {
    if buf.len() < 4 || buf[..4] != TENSOR_MAGIC {
        return Err(fmt_err(0, "bad magic, expected \"BSQK\""));
    }
    if buf.len() < HEADER_LEN {
        return Err(fmt_err(buf.len(), format!("truncated header: {} of {HEADER_LEN} bytes", buf.len())));
    }
    let version = u32_at(buf, 4);
    if version != TENSOR_VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let dtype = u32_at(buf, 8);
    if dtype != DTYPE_F32 {
        return Err(fmt_err(8, format!("unsupported dtype tag {dtype}")));
    }
    let header = TensorHeader {
        n: u32_at(buf, 12),
        d: u32_at(buf, 16),
        heads: u32_at(buf, 20),
    };
    for (off, v, name) in [(12, header.n, "N"), (16, header.d, "d"), (20, header.heads, "head count")] {
        if v == 0 {
            return Err(fmt_err(off, format!("{name} must be >= 1")));
        }
    }
    Ok(header)
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<HeadInput>> {
    let header = decode_header(buf)?;
    let expected = HEADER_LEN as u64 + header.payload_bytes();
    let actual = buf.len() as u64;
    if actual < expected {
        return Err(fmt_err(
            buf.len(),
            format!(
                "truncated payload: header N={} d={} heads={} needs {expected} bytes, file has {actual}",
                header.n, header.d, header.heads
            ),
        ));
    }
    if actual > expected {
        return Err(fmt_err(
            expected as usize,
            format!(
                "{} trailing bytes after payload for N={} d={} heads={}",
                actual - expected,
                header.n,
                header.d,
                header.heads
            ),
        ));
    }
    let (n, d) = (header.n as usize, header.d as usize);
    let mut off = HEADER_LEN;
    let mut read_matrix = || -> Result<DenseMatrix> {
        let bytes = &buf[off..off + 4 * n * d];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let start = off;
        off += 4 * n * d;
        DenseMatrix::new(n, d, data).map_err(|e| match e {
            Error::NonFinite { index } => fmt_err(start + 4 * index, "non-finite value"),
            other => other,
        })
    };
    (0..header.heads)
        .map(|_| {
            let q = read_matrix()?;
            let k = read_matrix()?;
            let v = read_matrix()?;
            HeadInput::new(q, k, v)
        })
        .collect()
}

pub fn write_tensor_file(path: impl AsRef<Path>, inputs: &[HeadInput]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensors(inputs)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Vec<HeadInput>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&buf)
}

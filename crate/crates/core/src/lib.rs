//! Reference engine for block-sparse causal attention.
//!
//! The pipeline has three stages per attention head:
//!
//! 1. **Quantization**: `Q` and `K` are quantized to symmetric 4-bit codes
//!    ([`quant`]).
//! 2. **Selection**: exact softmax statistics are computed over the
//!    sink-local region of each query block, every remaining causal key block
//!    is scored from the 4-bit estimates, and a block mask is emitted
//!    ([`selection`]).
//! 3. **Computation**: exact streaming-softmax attention restricted to the
//!    selected blocks ([`sparse`]).
//!
//! [`attention::full_attention`] is the dense ground truth every other stage is
//! checked against, and [`calibrate`] picks a per-head threshold that keeps the
//! sparse output within an L1 error bound of it.

pub mod attention;
pub mod calibrate;
pub mod config;
pub mod dense;
pub mod error;
pub mod grid;
pub mod mask;
pub mod quant;
pub mod report;
pub mod selection;
pub mod softmax;
pub mod sparse;
pub mod tensorfile;
pub mod workloads;

pub use attention::full_attention;
pub use calibrate::{calibrate_head, calibrate_model, l1_error, CalibrationParams, CalibrationProfile};
pub use dense::{DenseMatrix, HeadInput};
pub use error::{Error, Result};
pub use grid::{block_partition, causal_block_class, BlockGrid, CausalClass};
pub use mask::BlockMask;
pub use quant::{quantize_k, quantize_q, QuantizedMatrix};
pub use selection::{selection_pass, SelectionConfig, SinkLocalStats};
pub use sparse::{block_sparse_attention, flop_accounting, BlockAccounting, SparseAttentionOutput};

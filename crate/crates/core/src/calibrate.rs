//! Offline per-head threshold calibration.
//!
//! Starting from `tau0`, the threshold is halved until the worst L1 error over
//! all calibration samples, `sum |O - O~| / N`, is at most `theta`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::full_attention;
use crate::dense::{DenseMatrix, HeadInput};
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::mask::BlockMask;
use crate::quant::{quantize_k, quantize_q, QuantizedMatrix};
use crate::selection::{selection_pass, SelectionConfig};
use crate::sparse::{block_sparse_attention, flop_accounting, BlockAccounting};

pub const PROFILE_VERSION: u32 = 1;

/// `sum_{i,c} |O[i,c] - O~[i,c]| / N`, accumulated in `f64`.
pub fn l1_error(dense: &DenseMatrix, sparse: &DenseMatrix) -> Result<f64> {
    if dense.shape() != sparse.shape() {
        return Err(Error::Shape(format!(
            "outputs differ in shape: {:?} vs {:?}",
            dense.shape(),
            sparse.shape()
        )));
    }
    let total: f64 = dense
        .data()
        .iter()
        .zip(sparse.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(total / dense.rows() as f64)
}

/// One head's input with everything that does not depend on `tau` computed
/// once: dense reference output and quantized `Q`/`K`.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: HeadInput,
    pub dense: DenseMatrix,
    pub q: QuantizedMatrix,
    pub k: QuantizedMatrix,
    pub grid: BlockGrid,
}

#[derive(Debug, Clone)]
pub struct SampleEvaluation {
    pub err: f64,
    pub mask: BlockMask,
    pub accounting: BlockAccounting,
    pub output: DenseMatrix,
    pub coverage: Vec<usize>,
}

impl PreparedSample {
    pub fn new(input: HeadInput, selection: &SelectionConfig) -> Result<Self> {
        let grid = selection.grid(input.n())?;
        Ok(Self {
            dense: full_attention(&input),
            q: quantize_q(input.q()),
            k: quantize_k(input.k(), &grid),
            grid,
            input,
        })
    }

    pub fn select(&self, selection: &SelectionConfig) -> Result<BlockMask> {
        selection_pass(&self.input, &self.q, &self.k, selection)
    }

    pub fn evaluate_mask(&self, mask: BlockMask) -> Result<SampleEvaluation> {
        let sparse = block_sparse_attention(&self.input, &mask, &self.grid)?;
        Ok(SampleEvaluation {
            err: l1_error(&self.dense, &sparse.output)?,
            accounting: flop_accounting(&mask, &self.grid)?,
            mask,
            output: sparse.output,
            coverage: sparse.coverage,
        })
    }

    /// Quantize-select-compute at `selection.tau`, scored against the dense
    /// output.
    pub fn evaluate(&self, selection: &SelectionConfig) -> Result<SampleEvaluation> {
        self.evaluate_mask(self.select(selection)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub theta: f64,
    pub tau0: f64,
    pub max_halvings: u32,
    pub selection: SelectionConfig,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            theta: 0.4,
            tau0: 0.008,
            max_halvings: 30,
            selection: SelectionConfig::default(),
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta.is_nan() || self.theta <= 0.0 {
            return Err(Error::InvalidParameter(format!("theta must be > 0, got {}", self.theta)));
        }
        if !(self.tau0 > 0.0 && self.tau0 < 1.0) {
            return Err(Error::InvalidParameter(format!("tau0 must lie in (0, 1), got {}", self.tau0)));
        }
        self.selection.with_tau(self.tau0).validate()
    }

    /// `tau0 / 2^halvings`, exact in binary floating point.
    pub fn tau_at(&self, halvings: u32) -> f64 {
        self.tau0 / 2f64.powi(halvings as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationFlag {
    Converged,
    FloorReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub per_sample: Vec<f64>,
    pub max: f64,
}

impl ErrorReport {
    fn from_errors(per_sample: Vec<f64>) -> Self {
        let max = per_sample.iter().copied().fold(0.0, f64::max);
        Self { per_sample, max }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCalibration {
    pub tau: f64,
    pub flag: CalibrationFlag,
    pub halvings: u32,
    /// Errors at the returned `tau`.
    pub errors: ErrorReport,
}

/// Worst-sample error at each threshold, for prepared samples.
pub fn max_error_at(samples: &[PreparedSample], selection: &SelectionConfig) -> Result<ErrorReport> {
    let errs = samples
        .iter()
        .map(|s| s.evaluate(selection).map(|e| e.err))
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorReport::from_errors(errs))
}

pub fn calibrate_prepared(samples: &[PreparedSample], params: &CalibrationParams) -> Result<HeadCalibration> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("calibration needs at least one sample".into()));
    }
    params.validate()?;
    let mut halvings = 0;
    loop {
        let tau = params.tau_at(halvings);
        let errors = max_error_at(samples, &params.selection.with_tau(tau))?;
        if errors.max <= params.theta {
            return Ok(HeadCalibration {
                tau,
                flag: CalibrationFlag::Converged,
                halvings,
                errors,
            });
        }
        if halvings == params.max_halvings {
            return Ok(HeadCalibration {
                tau,
                flag: CalibrationFlag::FloorReached,
                halvings,
                errors,
            });
        }
        halvings += 1;
    }
}

pub fn calibrate_head(samples: &[HeadInput], params: &CalibrationParams) -> Result<HeadCalibration> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("calibration needs at least one sample".into()));
    }
    params.validate()?;
    let prepared = samples
        .iter()
        .map(|s| PreparedSample::new(s.clone(), &params.selection))
        .collect::<Result<Vec<_>>>()?;
    calibrate_prepared(&prepared, params)
}

/// Regroups `[sample][head]` into `[head][sample]`.
pub fn group_by_head(samples: Vec<Vec<HeadInput>>) -> Result<Vec<Vec<HeadInput>>> {
    let heads = samples.first().map_or(0, Vec::len);
    if heads == 0 {
        return Err(Error::InvalidParameter("no calibration samples".into()));
    }
    if let Some((idx, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != heads) {
        return Err(Error::Shape(format!(
            "sample {idx} has {} heads, sample 0 has {heads}",
            s.len()
        )));
    }
    let mut by_head: Vec<Vec<HeadInput>> = vec![Vec::with_capacity(samples.len()); heads];
    for sample in samples {
        for (h, input) in sample.into_iter().enumerate() {
            by_head[h].push(input);
        }
    }
    Ok(by_head)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadThreshold {
    pub layer: u32,
    pub head: u32,
    pub tau: f64,
    pub flag: CalibrationFlag,
    pub halvings: u32,
}

/// Persisted calibration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub version: u32,
    pub tau0: f64,
    pub theta: f64,
    #[serde(default)]
    pub max_halvings: Option<u32>,
    /// Identifiers of the calibration samples.
    #[serde(default)]
    pub samples: Vec<String>,
    pub heads: Vec<HeadThreshold>,
}

impl CalibrationProfile {
    pub fn new(params: &CalibrationParams, samples: Vec<String>) -> Self {
        Self {
            version: PROFILE_VERSION,
            tau0: params.tau0,
            theta: params.theta,
            max_halvings: Some(params.max_halvings),
            samples,
            heads: Vec::new(),
        }
    }

    pub fn tau_for(&self, layer: u32, head: u32) -> Option<f64> {
        self.heads
            .iter()
            .find(|h| h.layer == layer && h.head == head)
            .map(|h| h.tau)
    }

    /// Thresholds for heads `0..count` of `layer`.
    pub fn layer_taus(&self, layer: u32, count: usize) -> Result<Vec<f64>> {
        (0..count)
            .map(|h| {
                self.tau_for(layer, h as u32).ok_or_else(|| {
                    Error::Shape(format!("profile has no threshold for layer {layer} head {h}"))
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        if p.version != PROFILE_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported profile version {}", p.version)));
        }
        if let Some(h) = p.heads.iter().find(|h| !(h.tau > 0.0 && h.tau < 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "layer {} head {} has tau {} outside (0, 1)",
                h.layer, h.head, h.tau
            )));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Calibrates each head independently. `per_head[h]` holds head `h`'s
/// samples; heads run in parallel and results are ordered by head.
pub fn calibrate_model(
    per_head: &[Vec<HeadInput>],
    layer: u32,
    params: &CalibrationParams,
    sample_ids: Vec<String>,
) -> Result<(CalibrationProfile, Vec<HeadCalibration>)> {
    if per_head.is_empty() {
        return Err(Error::InvalidParameter("no heads to calibrate".into()));
    }
    let results = per_head
        .par_iter()
        .map(|samples| calibrate_head(samples, params))
        .collect::<Result<Vec<_>>>()?;
    let mut profile = CalibrationProfile::new(params, sample_ids);
    profile.heads = results
        .iter()
        .enumerate()
        .map(|(h, r)| HeadThreshold {
            layer,
            head: h as u32,
            tau: r.tau,
            flag: r.flag,
            halvings: r.halvings,
        })
        .collect();
    Ok((profile, results))
}

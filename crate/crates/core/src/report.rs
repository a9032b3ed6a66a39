//! Pipeline runs, threshold sweeps and their JSON reports.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::full_attention;
use crate::calibrate::{calibrate_prepared, l1_error, CalibrationParams, PreparedSample};
use crate::dense::HeadInput;
use crate::error::{Error, Result};
use crate::mask::BlockMask;
use crate::quant::{quantize_k, quantize_q};
use crate::selection::{selection_pass, SelectionConfig};
use crate::sparse::{block_sparse_attention, flop_accounting, BlockAccounting};

pub const REPORT_VERSION: u32 = 1;
pub const TIMING_LABEL: &str = "CPU reference";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl CoverageStats {
    pub fn from_counts(counts: &[usize]) -> Self {
        Self {
            min: counts.iter().copied().min().unwrap_or(0),
            mean: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
            max: counts.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: u32,
    pub tau: f64,
    pub blocks: BlockAccounting,
    pub err: f64,
    pub coverage: CoverageStats,
}

/// Wall time per stage in milliseconds, summed over heads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub quantization_ms: f64,
    pub selection_ms: f64,
    pub computation_ms: f64,
    pub dense_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedTimings {
    /// `(quantization + selection) / dense`.
    pub overhead_ratio: f64,
    /// `dense / computation`.
    pub computation_speedup: f64,
}

impl DerivedTimings {
    pub fn from_stages(t: &StageTimings) -> Self {
        let div = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        Self {
            overhead_ratio: div(t.quantization_ms + t.selection_ms, t.dense_ms),
            computation_speedup: div(t.dense_ms, t.computation_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub theta: f64,
    pub max_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub input: String,
    pub layer: u32,
    pub dense_mask: bool,
    pub heads: Vec<HeadReport>,
    pub totals: BlockAccounting,
    pub check: Option<CheckResult>,
    pub timing_label: String,
    pub timings: StageTimings,
    pub derived: DerivedTimings,
}

/// Fields that vary between otherwise identical runs.
pub const TIMING_FIELDS: [&str; 2] = ["timings", "derived"];

/// JSON value with timing fields removed, for diffing runs.
pub fn strip_timings(mut value: serde_json::Value) -> serde_json::Value {
    if let Some(obj) = value.as_object_mut() {
        for f in TIMING_FIELDS {
            obj.remove(f);
        }
    }
    value
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn stable_json(&self) -> Result<serde_json::Value> {
        Ok(strip_timings(serde_json::to_value(self)?))
    }

    /// Checks the block-count identities and that derived timings follow from
    /// the raw stage timings.
    pub fn verify_arithmetic(&self) -> bool {
        let blocks_ok = |b: &BlockAccounting| {
            b.computed + b.skipped == b.total && (0.0..=1.0).contains(&b.sparsity)
        };
        let merged = self
            .heads
            .iter()
            .fold(BlockAccounting::empty(), |acc, h| acc.merge(h.blocks));
        let d = DerivedTimings::from_stages(&self.timings);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        self.heads.iter().all(|h| blocks_ok(&h.blocks))
            && merged == self.totals
            && close(d.overhead_ratio, self.derived.overhead_ratio)
            && close(d.computation_speedup, self.derived.computation_speedup)
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += ms(start.elapsed());
    out
}

pub struct RunOptions {
    pub selection: SelectionConfig,
    pub layer: u32,
    pub dense_mask: bool,
    /// Error bound to re-verify, if any.
    pub check_theta: Option<f64>,
    pub input_label: String,
}

/// Runs quantize, select, compute and the dense baseline for every head at
/// its threshold in `taus`.
pub fn run_pipeline(inputs: &[HeadInput], taus: &[f64], opts: &RunOptions) -> Result<RunReport> {
    if inputs.len() != taus.len() {
        return Err(Error::Shape(format!(
            "{} heads but {} thresholds",
            inputs.len(),
            taus.len()
        )));
    }
    let mut t = StageTimings::default();
    let mut heads = Vec::with_capacity(inputs.len());
    for (h, (input, &tau)) in inputs.iter().zip(taus).enumerate() {
        let cfg = opts.selection.with_tau(tau);
        cfg.validate()?;
        let grid = cfg.grid(input.n())?;
        let (q, k) = timed(&mut t.quantization_ms, || (quantize_q(input.q()), quantize_k(input.k(), &grid)));
        let mask = if opts.dense_mask {
            BlockMask::all_causal(&grid)
        } else {
            timed(&mut t.selection_ms, || selection_pass(input, &q, &k, &cfg))?
        };
        let sparse = timed(&mut t.computation_ms, || block_sparse_attention(input, &mask, &grid))?;
        let dense = timed(&mut t.dense_ms, || full_attention(input));
        heads.push(HeadReport {
            head: h as u32,
            tau,
            blocks: flop_accounting(&mask, &grid)?,
            err: l1_error(&dense, &sparse.output)?,
            coverage: CoverageStats::from_counts(&sparse.coverage),
        });
    }
    let totals = heads.iter().fold(BlockAccounting::empty(), |acc, h| acc.merge(h.blocks));
    let check = opts.check_theta.map(|theta| {
        let max_err = heads.iter().map(|h| h.err).fold(0.0, f64::max);
        CheckResult {
            theta,
            max_err,
            passed: max_err <= theta,
        }
    });
    Ok(RunReport {
        version: REPORT_VERSION,
        input: opts.input_label.clone(),
        layer: opts.layer,
        dense_mask: opts.dense_mask,
        heads,
        totals,
        check,
        timing_label: TIMING_LABEL.to_string(),
        derived: DerivedTimings::from_stages(&t),
        timings: t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    Theta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepHead {
    pub head: u32,
    pub tau: f64,
    pub sparsity: f64,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Grid value (a threshold or an error bound, per the sweep axis).
    pub value: f64,
    /// Aggregate over heads: skipped / total causal blocks.
    pub sparsity: f64,
    /// Worst head error.
    pub err: f64,
    pub heads: Vec<SweepHead>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: u32,
    pub input: String,
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Per head, sparsity never decreases as the threshold grows.
    pub monotone: bool,
}

/// Evaluates every head at each grid point. Grid values must lie in `(0, 1)`
/// for a threshold sweep and be positive for an error-bound sweep; rows come
/// out in descending grid order.
pub fn sweep(
    inputs: &[HeadInput],
    axis: SweepAxis,
    grid_values: &[f64],
    params: &CalibrationParams,
    input_label: String,
) -> Result<SweepReport> {
    if grid_values.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    for &v in grid_values {
        let ok = match axis {
            SweepAxis::Tau => v > 0.0 && v < 1.0,
            SweepAxis::Theta => v > 0.0 && v.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("sweep grid value {v} is out of range")));
        }
    }
    let mut values = grid_values.to_vec();
    values.sort_by(|a, b| b.total_cmp(a));
    values.dedup();

    let prepared = inputs
        .iter()
        .map(|h| PreparedSample::new(h.clone(), &params.selection))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(values.len());
    for &value in &values {
        let mut heads = Vec::with_capacity(prepared.len());
        let mut totals = BlockAccounting::empty();
        for (h, sample) in prepared.iter().enumerate() {
            let tau = match axis {
                SweepAxis::Tau => value,
                SweepAxis::Theta => {
                    let p = CalibrationParams { theta: value, ..*params };
                    calibrate_prepared(std::slice::from_ref(sample), &p)?.tau
                }
            };
            let eval = sample.evaluate(&params.selection.with_tau(tau))?;
            totals = totals.merge(eval.accounting);
            heads.push(SweepHead {
                head: h as u32,
                tau,
                sparsity: eval.accounting.sparsity,
                err: eval.err,
            });
        }
        rows.push(SweepRow {
            value,
            sparsity: totals.sparsity,
            err: heads.iter().map(|h| h.err).fold(0.0, f64::max),
            heads,
        });
    }

    let monotone = (0..prepared.len()).all(|h| {
        let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.heads[h].tau, r.heads[h].sparsity)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.windows(2).all(|w| w[0].1 <= w[1].1)
    });
    Ok(SweepReport {
        version: REPORT_VERSION,
        input: input_label,
        axis,
        rows,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{generate, WorkloadSpec};

    fn opts() -> RunOptions {
        RunOptions {
            selection: SelectionConfig::default(),
            layer: 0,
            dense_mask: false,
            check_theta: Some(0.4),
            input_label: "t".into(),
        }
    }

    #[test]
    fn derived_timings() {
        let t = StageTimings { quantization_ms: 1.0, selection_ms: 2.0, computation_ms: 4.0, dense_ms: 12.0 };
        let d = DerivedTimings::from_stages(&t);
        assert_eq!(d.overhead_ratio, 0.25);
        assert_eq!(d.computation_speedup, 3.0);
        assert_eq!(DerivedTimings::from_stages(&StageTimings::default()).overhead_ratio, 0.0);
    }

    #[test]
    fn run_report_arithmetic() {
        let inputs = generate(&WorkloadSpec::sink_local(1, 600, 16, 2)).unwrap();
        let r = run_pipeline(&inputs, &[0.004, 0.002], &opts()).unwrap();
        assert!(r.verify_arithmetic());
        assert_eq!(r.heads.len(), 2);
        assert!(r.stable_json().unwrap().get("timings").is_none());
        assert!(run_pipeline(&inputs, &[0.004], &opts()).is_err());
    }

    #[test]
    fn dense_mask_run_has_no_error() {
        let inputs = generate(&WorkloadSpec::gaussian(2, 300, 16, 1)).unwrap();
        let r = run_pipeline(&inputs, &[0.004], &RunOptions { dense_mask: true, ..opts() }).unwrap();
        assert!(r.heads[0].err <= 1e-5);
        assert_eq!(r.totals.skipped, 0);
    }

    #[test]
    fn sweep_rows_and_validation() {
        let inputs = generate(&WorkloadSpec::sink_local(3, 700, 16, 1)).unwrap();
        let p = CalibrationParams::default();
        let r = sweep(&inputs, SweepAxis::Tau, &[0.002, 0.008, 0.004], &p, "x".into()).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![0.008, 0.004, 0.002]);
        assert!(r.monotone);
        assert_eq!(sweep(&inputs, SweepAxis::Tau, &[0.004], &p, "x".into()).unwrap().rows.len(), 1);
        assert!(sweep(&inputs, SweepAxis::Tau, &[], &p, "x".into()).is_err());
        assert!(sweep(&inputs, SweepAxis::Tau, &[1.5], &p, "x".into()).is_err());
        assert!(sweep(&inputs, SweepAxis::Theta, &[0.0], &p, "x".into()).is_err());
    }
}

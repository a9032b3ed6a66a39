//! C ABI over `blocksparse-core`.
//!
//! Conventions:
//! - Every fallible call returns a [`BsStatus`]; `BS_STATUS_OK` is zero.
//! - On failure, [`bs_last_error`] returns a message for the calling thread,
//!   valid until that thread's next call into this library.
//! - Handles (`BsHead`, `BsMask`, `BsHeadList`) are opaque and owned by the
//!   caller once returned; release them with the matching `*_free`.
//! - Matrices are row-major `float` arrays of `n * d` elements.
//! - Panics never cross the boundary; they surface as `BS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use blocksparse_core::calibrate::CalibrationFlag;
use blocksparse_core::tensorfile::read_tensor_file;
use blocksparse_core::{
    block_sparse_attention, calibrate_head, flop_accounting, full_attention, l1_error, quantize_k, quantize_q,
    selection_pass, BlockGrid, BlockMask, CalibrationParams, DenseMatrix, Error, HeadInput, SelectionConfig,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    NonFinite = 3,
    InvalidParameter = 4,
    Domain = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// Selection settings; see [`bs_selection_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsSelectionConfig {
    pub tau: f64,
    pub sink_tokens: usize,
    pub local_tokens_min: usize,
    pub segment_size: usize,
    pub block_q: usize,
    pub block_k: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsCalibrationParams {
    pub theta: f64,
    pub tau0: f64,
    pub max_halvings: u32,
    pub selection: BsSelectionConfig,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BsCalibrationResult {
    pub tau: f64,
    pub halvings: u32,
    /// True when the halving limit was reached without meeting theta.
    pub floor_reached: bool,
    /// Largest per-sample error at `tau`.
    pub max_err: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BsAccounting {
    pub computed: usize,
    pub skipped: usize,
    pub total: usize,
    pub sparsity: f64,
}

/// One attention head: Q, K, V of shape `n x d`.
pub struct BsHead {
    inner: HeadInput,
}

/// Block mask together with the grid it was built for.
pub struct BsMask {
    mask: BlockMask,
    grid: BlockGrid,
}

/// Heads read from a tensor file.
pub struct BsHeadList {
    heads: Vec<BsHead>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BsStatus {
    match e {
        Error::Shape(_) => BsStatus::Shape,
        Error::NonFinite { .. } => BsStatus::NonFinite,
        Error::InvalidParameter(_) => BsStatus::InvalidParameter,
        Error::Domain(_) => BsStatus::Domain,
        Error::Io { .. } => BsStatus::Io,
        Error::Format { .. } | Error::Json(_) => BsStatus::Format,
    }
}

struct Fail(BsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BsStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Err(Fail(BsStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
            BsStatus::Ok
        }
        Err(Fail(status, msg)) => {
            set_error(msg);
            status
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn elems(n: usize, d: usize) -> Result<usize, Fail> {
    n.checked_mul(d)
        .ok_or_else(|| Fail(BsStatus::Shape, format!("{n} x {d} overflows")))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(BsStatus::Shape, format!("{what} has {got} elements, expected {want}")));
    }
    Ok(())
}

impl From<BsSelectionConfig> for SelectionConfig {
    fn from(c: BsSelectionConfig) -> Self {
        SelectionConfig {
            tau: c.tau,
            sink_tokens: c.sink_tokens,
            local_tokens_min: c.local_tokens_min,
            segment_size: c.segment_size,
            block_q: c.block_q,
            block_k: c.block_k,
        }
    }
}

impl From<SelectionConfig> for BsSelectionConfig {
    fn from(c: SelectionConfig) -> Self {
        BsSelectionConfig {
            tau: c.tau,
            sink_tokens: c.sink_tokens,
            local_tokens_min: c.local_tokens_min,
            segment_size: c.segment_size,
            block_q: c.block_q,
            block_k: c.block_k,
        }
    }
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library from the
/// same thread.
#[no_mangle]
pub extern "C" fn bs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default selection settings (tau 0.004, 32 sink tokens, at least 128 local
/// tokens, segments of 4 blocks, 64-row query blocks, 32-row key blocks).
#[no_mangle]
pub extern "C" fn bs_selection_config_default() -> BsSelectionConfig {
    SelectionConfig::default().into()
}

/// Default calibration settings (theta 0.4, tau0 0.008, 30 halvings).
#[no_mangle]
pub extern "C" fn bs_calibration_params_default() -> BsCalibrationParams {
    let p = CalibrationParams::default();
    BsCalibrationParams {
        theta: p.theta,
        tau0: p.tau0,
        max_halvings: p.max_halvings,
        selection: p.selection.into(),
    }
}

/// Copies `q`, `k`, `v` (each `n * d` floats) into a new head.
///
/// # Safety
/// `q`, `k`, `v` must each point to `n * d` readable floats; `out` must be
/// a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn bs_head_new(
    n: usize,
    d: usize,
    q: *const f32,
    k: *const f32,
    v: *const f32,
    out: *mut *mut BsHead,
) -> BsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = elems(n, d)?;
        let m = |p: *const f32, what: &str| -> Result<DenseMatrix, Fail> {
            Ok(DenseMatrix::new(n, d, slice(p, len, what)?.to_vec())?)
        };
        let inner = HeadInput::new(m(q, "q")?, m(k, "k")?, m(v, "v")?)?;
        *out = Box::into_raw(Box::new(BsHead { inner }));
        Ok(())
    })
}

/// # Safety
/// `head` must be null or a handle from [`bs_head_new`] not freed before.
#[no_mangle]
pub unsafe extern "C" fn bs_head_free(head: *mut BsHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Token count of `head`, or 0 for a null handle.
///
/// # Safety
/// `head` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_head_n(head: *const BsHead) -> usize {
    head.as_ref().map_or(0, |h| h.inner.n())
}

/// Head dimension of `head`, or 0 for a null handle.
///
/// # Safety
/// `head` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_head_d(head: *const BsHead) -> usize {
    head.as_ref().map_or(0, |h| h.inner.d())
}

/// Dense causal attention into `out` (`n * d` floats).
///
/// # Safety
/// `head` must be a live handle and `out` must point to `out_len` writable
/// floats.
#[no_mangle]
pub unsafe extern "C" fn bs_full_attention(head: *const BsHead, out: *mut f32, out_len: usize) -> BsStatus {
    guard(|| {
        let h = &reference(head, "head")?.inner;
        check_len(out_len, h.n() * h.d(), "out")?;
        let o = full_attention(h);
        slice_mut(out, out_len, "out")?.copy_from_slice(o.data());
        Ok(())
    })
}

/// Quantizes `head` and runs block selection with `config`.
///
/// # Safety
/// `head` and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_select(
    head: *const BsHead,
    config: *const BsSelectionConfig,
    out: *mut *mut BsMask,
) -> BsStatus {
    guard(|| {
        let h = &reference(head, "head")?.inner;
        let cfg: SelectionConfig = (*reference(config, "config")?).into();
        if out.is_null() {
            return Err(null("out"));
        }
        cfg.validate()?;
        let grid = cfg.grid(h.n())?;
        let mask = selection_pass(h, &quantize_q(h.q()), &quantize_k(h.k(), &grid), &cfg)?;
        *out = Box::into_raw(Box::new(BsMask { mask, grid }));
        Ok(())
    })
}

/// Mask with every causal tile selected, for a sequence of `n` tokens.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_mask_all_causal(n: usize, block_q: usize, block_k: usize, out: *mut *mut BsMask) -> BsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = BlockGrid::new(n, block_q, block_k)?;
        *out = Box::into_raw(Box::new(BsMask { mask: BlockMask::all_causal(&grid), grid }));
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_mask_free(mask: *mut BsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Query-block and key-block counts of `mask`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_mask_dims(mask: *const BsMask, n_q: *mut usize, n_k: *mut usize) -> BsStatus {
    guard(|| {
        let m = &reference(mask, "mask")?.mask;
        if n_q.is_null() || n_k.is_null() {
            return Err(null("output"));
        }
        *n_q = m.n_q();
        *n_k = m.n_k();
        Ok(())
    })
}

/// Whether tile `(i, j)` is selected.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_mask_get(mask: *const BsMask, i: usize, j: usize, out: *mut bool) -> BsStatus {
    guard(|| {
        let m = &reference(mask, "mask")?.mask;
        if out.is_null() {
            return Err(null("out"));
        }
        if i >= m.n_q() || j >= m.n_k() {
            return Err(Fail(
                BsStatus::Shape,
                format!("tile ({i}, {j}) outside {} x {}", m.n_q(), m.n_k()),
            ));
        }
        *out = m.get(i, j);
        Ok(())
    })
}

/// Sets tile `(i, j)`. Bits on tiles entirely above the diagonal are
/// accepted and ignored by [`bs_sparse_attention`].
///
/// # Safety
/// `mask` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_mask_set(mask: *mut BsMask, i: usize, j: usize, value: bool) -> BsStatus {
    guard(|| {
        let m = &mut mask.as_mut().ok_or_else(|| null("mask"))?.mask;
        if i >= m.n_q() || j >= m.n_k() {
            return Err(Fail(
                BsStatus::Shape,
                format!("tile ({i}, {j}) outside {} x {}", m.n_q(), m.n_k()),
            ));
        }
        m.set(i, j, value);
        Ok(())
    })
}

/// Computed, skipped and total causal tiles, and the skipped fraction.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_mask_accounting(mask: *const BsMask, out: *mut BsAccounting) -> BsStatus {
    guard(|| {
        let m = reference(mask, "mask")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let a = flop_accounting(&m.mask, &m.grid)?;
        *out = BsAccounting {
            computed: a.computed,
            skipped: a.skipped,
            total: a.total,
            sparsity: a.sparsity,
        };
        Ok(())
    })
}

/// Exact attention over the tiles selected in `mask`. `coverage`, if not
/// null, receives the number of keys each of the `n` rows attended to.
///
/// # Safety
/// `head` and `mask` must be live handles; `out` must point to `out_len`
/// writable floats; `coverage` must be null or point to `coverage_len`
/// writable elements.
#[no_mangle]
pub unsafe extern "C" fn bs_sparse_attention(
    head: *const BsHead,
    mask: *const BsMask,
    out: *mut f32,
    out_len: usize,
    coverage: *mut usize,
    coverage_len: usize,
) -> BsStatus {
    guard(|| {
        let h = &reference(head, "head")?.inner;
        let m = reference(mask, "mask")?;
        check_len(out_len, h.n() * h.d(), "out")?;
        if !coverage.is_null() {
            check_len(coverage_len, h.n(), "coverage")?;
        }
        let r = block_sparse_attention(h, &m.mask, &m.grid)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(r.output.data());
        if !coverage.is_null() {
            slice_mut(coverage, coverage_len, "coverage")?.copy_from_slice(&r.coverage);
        }
        Ok(())
    })
}

/// Per-head threshold calibration over `count` samples of the same head.
///
/// # Safety
/// `samples` must point to `count` live head handles; `params` and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_calibrate_head(
    samples: *const *const BsHead,
    count: usize,
    params: *const BsCalibrationParams,
    out: *mut BsCalibrationResult,
) -> BsStatus {
    guard(|| {
        let ptrs = slice(samples, count, "samples")?;
        let p = reference(params, "params")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let heads = ptrs
            .iter()
            .map(|&h| reference(h, "sample").map(|h| h.inner.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let params = CalibrationParams {
            theta: p.theta,
            tau0: p.tau0,
            max_halvings: p.max_halvings,
            selection: p.selection.into(),
        };
        let c = calibrate_head(&heads, &params)?;
        *out = BsCalibrationResult {
            tau: c.tau,
            halvings: c.halvings,
            floor_reached: c.flag == CalibrationFlag::FloorReached,
            max_err: c.errors.max,
        };
        Ok(())
    })
}

/// `sum |a - b| / n` over two `n x d` matrices.
///
/// # Safety
/// `a` and `b` must point to `n * d` readable floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_l1_error(n: usize, d: usize, a: *const f32, b: *const f32, out: *mut f64) -> BsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = elems(n, d)?;
        let a = DenseMatrix::new(n, d, slice(a, len, "a")?.to_vec())?;
        let b = DenseMatrix::new(n, d, slice(b, len, "b")?.to_vec())?;
        *out = l1_error(&a, &b)?;
        Ok(())
    })
}

/// Reads every head of a tensor file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_read_tensor_file(path: *const c_char, out: *mut *mut BsHeadList) -> BsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(BsStatus::InvalidParameter, "path is not valid UTF-8".into()))?;
        let heads = read_tensor_file(path)?.into_iter().map(|inner| BsHead { inner }).collect();
        *out = Box::into_raw(Box::new(BsHeadList { heads }));
        Ok(())
    })
}

/// # Safety
/// `list` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_head_list_len(list: *const BsHeadList) -> usize {
    list.as_ref().map_or(0, |l| l.heads.len())
}

/// Borrowed head `index` of `list`, or null when out of range. The pointer
/// is valid until the list is freed and must not be passed to
/// [`bs_head_free`].
///
/// # Safety
/// `list` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_head_list_get(list: *const BsHeadList, index: usize) -> *const BsHead {
    list.as_ref()
        .and_then(|l| l.heads.get(index))
        .map_or(ptr::null(), |h| h as *const BsHead)
}

/// # Safety
/// `list` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_head_list_free(list: *mut BsHeadList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

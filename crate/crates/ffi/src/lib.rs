//! C ABI for embedding a trained detector in non-Rust hosts.
//!
//! The surface is deliberately small: load a checkpoint into an opaque
//! handle, score feature windows, free the handle. Every function returns a
//! `PW_*` status code; `pw_last_error` retrieves a message for the most
//! recent failure on the calling thread. The generated header lands in
//! `include/pumpwatch.h`.
//!
//! Thread safety: a `PwModel` is immutable after load, so concurrent
//! `pw_model_predict` calls on one handle are fine. The error message is
//! thread-local.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use pumpwatch::config::{ConfigError, RunConfig};
use pumpwatch::dataset::DatasetError;
use pumpwatch::ingest::FEATURE_COUNT;
use pumpwatch::models::Model;
use pumpwatch::nn::{Checkpoint, NnError, Tensor};
use pumpwatch::train::{compute_metrics, TrainError};
use pumpwatch::InputTransform;

/// Success.
pub const PW_OK: i32 = 0;
/// Filesystem problem: missing file, permissions, short read.
pub const PW_ERR_IO: i32 = 1;
/// A file exists but does not decode: corrupt checkpoint, malformed config.
pub const PW_ERR_FORMAT: i32 = 2;
/// The caller passed something unusable: null pointer, wrong length,
/// out-of-range value, artifacts that do not belong together.
pub const PW_ERR_INVALID_ARG: i32 = 3;
/// A failure that indicates a bug rather than bad input.
pub const PW_ERR_INTERNAL: i32 = 4;

/// A loaded detector: model weights plus the input normalization fitted at
/// training time, both read from the checkpoint.
pub struct PwModel {
    model: Model,
    transform: InputTransform,
    segment_length: usize,
    threshold: f64,
    param_count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(code: i32, msg: &str) -> i32 {
    set_error(msg);
    code
}

trait ErrCode {
    fn code(&self) -> i32;
}

impl ErrCode for NnError {
    fn code(&self) -> i32 {
        match self {
            NnError::Io(_) => PW_ERR_IO,
            NnError::BadCheckpoint(_) => PW_ERR_FORMAT,
            NnError::ShapeMismatch { .. }
            | NnError::InvalidArg(_)
            | NnError::SegmentTooShort(_)
            | NnError::LabelOutOfRange(_) => PW_ERR_INVALID_ARG,
            _ => PW_ERR_INTERNAL,
        }
    }
}

impl ErrCode for ConfigError {
    fn code(&self) -> i32 {
        match self {
            ConfigError::Io { .. } => PW_ERR_IO,
            ConfigError::Parse(_) => PW_ERR_FORMAT,
            ConfigError::Invalid(_) => PW_ERR_INVALID_ARG,
        }
    }
}

impl ErrCode for DatasetError {
    fn code(&self) -> i32 {
        match self {
            DatasetError::Io(_) => PW_ERR_IO,
            DatasetError::BadCache(_) => PW_ERR_FORMAT,
            _ => PW_ERR_INVALID_ARG,
        }
    }
}

impl ErrCode for TrainError {
    fn code(&self) -> i32 {
        match self {
            TrainError::Nn(e) => e.code(),
            TrainError::Dataset(e) => e.code(),
            TrainError::NonFiniteLoss { .. } => PW_ERR_INTERNAL,
            _ => PW_ERR_INVALID_ARG,
        }
    }
}

fn fail_with(e: &(impl ErrCode + std::fmt::Display)) -> i32 {
    fail(e.code(), &e.to_string())
}

/// Run `f` with panics converted to `PW_ERR_INTERNAL` so they never unwind
/// across the C boundary.
fn guarded(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => fail(PW_ERR_INTERNAL, "internal panic"),
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn path_arg(s: *const c_char, name: &str) -> Result<PathBuf, i32> {
    if s.is_null() {
        return Err(fail(PW_ERR_INVALID_ARG, &format!("{name} is null")));
    }
    match CStr::from_ptr(s).to_str() {
        Ok(p) => Ok(PathBuf::from(p)),
        Err(_) => Err(fail(PW_ERR_INVALID_ARG, &format!("{name} is not valid UTF-8"))),
    }
}

fn load_model(config_path: &Path, checkpoint_path: Option<PathBuf>) -> Result<PwModel, i32> {
    let cfg = RunConfig::load(config_path).map_err(|e| fail_with(&e))?;
    let ckpt_path =
        checkpoint_path.unwrap_or_else(|| cfg.output.dir.join("checkpoint.pwck"));
    let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| fail_with(&e))?;
    let kind: pumpwatch::ModelKind =
        ckpt.model_kind.parse().map_err(|e: NnError| fail_with(&e))?;
    if kind != cfg.model.kind {
        return Err(fail(
            PW_ERR_INVALID_ARG,
            &format!(
                "checkpoint holds a {} but the config selects {}",
                ckpt.model_kind,
                cfg.model.kind.as_str()
            ),
        ));
    }
    let mut model = cfg.build_model(ckpt.seed).map_err(|e| fail_with(&e))?;
    model.set_params(ckpt.params.clone()).map_err(|e| fail_with(&e))?;
    let transform = InputTransform::from_buffers(&ckpt.buffers).map_err(|e| fail_with(&e))?;
    let threshold = ckpt
        .best
        .map(|b| b.threshold)
        .unwrap_or_else(|| kind.default_threshold());
    Ok(PwModel {
        param_count: model.param_count(),
        model,
        transform,
        segment_length: cfg.data.segment_length,
        threshold,
    })
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a detector from a run config and a checkpoint.
///
/// `checkpoint_path` may be null, in which case the config's default
/// (`<output.dir>/checkpoint.pwck`) is used. On success `*out` owns the
/// handle; release it with `pw_model_free`.
///
/// # Safety
/// `config_path` (and `checkpoint_path` when non-null) must be valid
/// NUL-terminated strings, and `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn pw_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut PwModel,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail(PW_ERR_INVALID_ARG, "out is null");
        }
        let cfg_path = match path_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(code) => return code,
        };
        let ckpt_path = if checkpoint_path.is_null() {
            None
        } else {
            match path_arg(checkpoint_path, "checkpoint_path") {
                Ok(p) => Some(p),
                Err(code) => return code,
            }
        };
        match load_model(&cfg_path, ckpt_path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(model));
                PW_OK
            }
            Err(code) => code,
        }
    })
}

/// Release a handle returned by `pw_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer obtained from `pw_model_load` that has
/// not been freed already.
#[no_mangle]
pub unsafe extern "C" fn pw_model_free(model: *mut PwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(model: *const PwModel) -> Result<&'a PwModel, i32> {
    model.as_ref().ok_or_else(|| fail(PW_ERR_INVALID_ARG, "model is null"))
}

/// Number of trainable parameters in the loaded model.
///
/// # Safety
/// `model` must come from `pw_model_load`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pw_model_param_count(model: *const PwModel, out: *mut u64) -> i32 {
    guarded(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(code) => return code,
        };
        if out.is_null() {
            return fail(PW_ERR_INVALID_ARG, "out is null");
        }
        *out = m.param_count as u64;
        PW_OK
    })
}

/// The window length (in chunks) the detector was trained on.
///
/// # Safety
/// `model` must come from `pw_model_load`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pw_model_segment_length(model: *const PwModel, out: *mut u64) -> i32 {
    guarded(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(code) => return code,
        };
        if out.is_null() {
            return fail(PW_ERR_INVALID_ARG, "out is null");
        }
        *out = m.segment_length as u64;
        PW_OK
    })
}

/// The decision threshold stored with the checkpoint.
///
/// # Safety
/// `model` must come from `pw_model_load`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pw_model_threshold(model: *const PwModel, out: *mut f64) -> i32 {
    guarded(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(code) => return code,
        };
        if out.is_null() {
            return fail(PW_ERR_INVALID_ARG, "out is null");
        }
        *out = m.threshold;
        PW_OK
    })
}

/// Score one window of chunk features.
///
/// `features` is row-major `rows x 15`, rows ordered oldest to newest, the
/// 15 columns in feature-CSV order: Date through AvgPriceMax (everything
/// except the trailing Label column). Normalization and feature masking are
/// applied internally; pass raw aggregated values. `rows` should equal
/// `pw_model_segment_length` — an attention detector rejects any other
/// length, the convolutional one accepts longer windows. The pump
/// probability lands in `*out_prob`.
///
/// # Safety
/// `model` must come from `pw_model_load`; `features` must point to
/// `rows * 15` doubles; `out_prob` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pw_model_predict(
    model: *const PwModel,
    features: *const f64,
    rows: u64,
    out_prob: *mut f64,
) -> i32 {
    guarded(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(code) => return code,
        };
        if features.is_null() {
            return fail(PW_ERR_INVALID_ARG, "features is null");
        }
        if out_prob.is_null() {
            return fail(PW_ERR_INVALID_ARG, "out_prob is null");
        }
        let rows = rows as usize;
        if rows == 0 {
            return fail(PW_ERR_INVALID_ARG, "rows must be >= 1");
        }
        let flat = std::slice::from_raw_parts(features, rows * FEATURE_COUNT);
        let mut data = Vec::with_capacity(rows * FEATURE_COUNT);
        for r in 0..rows {
            let mut row = [0.0; FEATURE_COUNT];
            row.copy_from_slice(&flat[r * FEATURE_COUNT..(r + 1) * FEATURE_COUNT]);
            m.transform.apply(&mut row);
            data.extend_from_slice(&row);
        }
        let x = match Tensor::new(vec![1, rows, FEATURE_COUNT], data) {
            Ok(x) => x,
            Err(e) => return fail_with(&e),
        };
        match m.model.predict(&x) {
            Ok(probs) => {
                *out_prob = probs[0];
                PW_OK
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Precision, recall, and F1 of probabilities against 0/1 labels at the
/// given threshold (predicted positive when probability >= threshold). Any
/// of the three output pointers may be null to skip that value.
///
/// # Safety
/// `probs` and `labels` must each point to `len` doubles; non-null outputs
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn pw_metrics(
    probs: *const f64,
    labels: *const f64,
    len: u64,
    threshold: f64,
    out_precision: *mut f64,
    out_recall: *mut f64,
    out_f1: *mut f64,
) -> i32 {
    guarded(|| {
        if probs.is_null() || labels.is_null() {
            return fail(PW_ERR_INVALID_ARG, "probs and labels must be non-null");
        }
        let len = len as usize;
        let probs = std::slice::from_raw_parts(probs, len);
        let labels = std::slice::from_raw_parts(labels, len);
        match compute_metrics(probs, labels, threshold) {
            Ok(m) => {
                if !out_precision.is_null() {
                    *out_precision = m.precision;
                }
                if !out_recall.is_null() {
                    *out_recall = m.recall;
                }
                if !out_f1.is_null() {
                    *out_f1 = m.f1;
                }
                PW_OK
            }
            Err(e) => fail_with(&e),
        }
    })
}

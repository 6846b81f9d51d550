//! C ABI over the lmda library: opaque handles, integer status codes and
//! a thread-local last-error message.
//!
//! Ownership rules: every constructor returns a heap handle the caller
//! must release with the matching `_free`; all other functions borrow.
//! Null handles are rejected with `LMDA_STATUS_NULL_ARGUMENT`, never
//! dereferenced.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::{c_char, c_double, c_int};
use std::path::PathBuf;

use lmda::dataio::{self, TrialSet};
use lmda::model::{load_model, save_model, LmdaModel, ModelConfig};
use lmda::train::{evaluate, predict_probs, train_loop, TrainConfig};

/// Status codes mirroring the CLI exit-code taxonomy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmdaStatus {
    Ok = 0,
    UsageError = 1,
    DataError = 2,
    NumericError = 3,
    NullArgument = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(status: LmdaStatus, msg: impl std::fmt::Display) -> LmdaStatus {
    set_error(&msg.to_string());
    status
}

/// Copies the last error message for this thread into `buf` (always
/// NUL-terminated when `len > 0`) and returns the full message length in
/// bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn lmda_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Opaque dataset handle.
pub struct LmdaDataset {
    inner: TrialSet,
}

/// Opaque model handle.
pub struct LmdaModelHandle {
    inner: LmdaModel,
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, LmdaStatus> {
    if path.is_null() {
        set_error("null path");
        return Err(LmdaStatus::NullArgument);
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(LmdaStatus::UsageError)
        }
    }
}

/// Loads a dataset container. Returns null on failure; see
/// [`lmda_last_error`].
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lmda_dataset_load(path: *const c_char) -> *mut LmdaDataset {
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(_) => return std::ptr::null_mut(),
    };
    match dataio::load(&path) {
        Ok(inner) => Box::into_raw(Box::new(LmdaDataset { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Synthesizes a two-class oscillatory (ERD-style) dataset. Returns null
/// on failure.
#[no_mangle]
pub extern "C" fn lmda_dataset_synth_erd(
    n_per_class: usize,
    channels: usize,
    samples: usize,
    fs_hz: c_double,
    seed: u64,
) -> *mut LmdaDataset {
    match dataio::synth_erd(n_per_class, channels, samples, fs_hz, seed) {
        Ok(inner) => Box::into_raw(Box::new(LmdaDataset { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Synthesizes a two-class deflection (ERP-style) dataset. Returns null
/// on failure.
#[no_mangle]
pub extern "C" fn lmda_dataset_synth_erp(
    n_per_class: usize,
    channels: usize,
    samples: usize,
    fs_hz: c_double,
    seed: u64,
) -> *mut LmdaDataset {
    match dataio::synth_erp(n_per_class, channels, samples, fs_hz, seed) {
        Ok(inner) => Box::into_raw(Box::new(LmdaDataset { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Writes a dataset container atomically.
///
/// # Safety
/// `ds` must be a live dataset handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lmda_dataset_save(ds: *const LmdaDataset, path: *const c_char) -> LmdaStatus {
    if ds.is_null() {
        return fail(LmdaStatus::NullArgument, "null dataset");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match dataio::save(&(*ds).inner, &path) {
        Ok(()) => LmdaStatus::Ok,
        Err(e) => fail(LmdaStatus::DataError, e),
    }
}

macro_rules! dataset_getter {
    ($name:ident, $method:ident) => {
        /// Returns the named extent, or -1 for a null handle.
        ///
        /// # Safety
        /// `ds` must be a live dataset handle or null.
        #[no_mangle]
        pub unsafe extern "C" fn $name(ds: *const LmdaDataset) -> i64 {
            if ds.is_null() {
                set_error("null dataset");
                return -1;
            }
            (*ds).inner.$method() as i64
        }
    };
}

dataset_getter!(lmda_dataset_n_trials, n_trials);
dataset_getter!(lmda_dataset_n_channels, n_channels);
dataset_getter!(lmda_dataset_n_samples, n_samples);
dataset_getter!(lmda_dataset_n_classes, n_classes);

/// Sampling rate in Hz, or a negative value for a null handle.
///
/// # Safety
/// `ds` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn lmda_dataset_fs_hz(ds: *const LmdaDataset) -> c_double {
    if ds.is_null() {
        set_error("null dataset");
        return -1.0;
    }
    (*ds).inner.fs_hz
}

/// # Safety
/// `ds` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lmda_dataset_free(ds: *mut LmdaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a model checkpoint. Returns null on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lmda_model_load(path: *const c_char) -> *mut LmdaModelHandle {
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(_) => return std::ptr::null_mut(),
    };
    match load_model(&path) {
        Ok(inner) => Box::into_raw(Box::new(LmdaModelHandle { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Trains a fresh model on `train`, evaluating each epoch on `test`, and
/// returns the trained handle. Attention modules can be ablated with the
/// boolean flags. Returns null on failure.
///
/// # Safety
/// `train` and `test` must be live dataset handles.
#[no_mangle]
pub unsafe extern "C" fn lmda_model_train(
    train: *const LmdaDataset,
    test: *const LmdaDataset,
    epochs: usize,
    batch: usize,
    lr: c_double,
    seed: u64,
    use_channel_attn: c_int,
    use_depth_attn: c_int,
) -> *mut LmdaModelHandle {
    if train.is_null() || test.is_null() {
        set_error("null dataset");
        return std::ptr::null_mut();
    }
    let tr = &(*train).inner;
    let te = &(*test).inner;
    let mut mc = ModelConfig::new(
        tr.n_channels(),
        tr.n_samples(),
        tr.n_classes(),
        tr.fs_hz,
        tr.n_trials(),
        seed,
    );
    mc.use_channel_attn = use_channel_attn != 0;
    mc.use_depth_attn = use_depth_attn != 0;
    let mut tc = TrainConfig::new(seed);
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.lr = lr;
    let mut model = match LmdaModel::init(mc) {
        Ok(m) => m,
        Err(e) => {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    match train_loop(&mut model, tr, te, &tc) {
        Ok(_) => Box::into_raw(Box::new(LmdaModelHandle { inner: model })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Writes a model checkpoint atomically.
///
/// # Safety
/// `model` must be a live model handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lmda_model_save(model: *const LmdaModelHandle, path: *const c_char) -> LmdaStatus {
    if model.is_null() {
        return fail(LmdaStatus::NullArgument, "null model");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match save_model(&(*model).inner, &path) {
        Ok(()) => LmdaStatus::Ok,
        Err(e) => fail(LmdaStatus::DataError, e),
    }
}

/// Trainable parameter count, or a negative value for a null handle.
///
/// # Safety
/// `model` must be a live model handle or null.
#[no_mangle]
pub unsafe extern "C" fn lmda_model_param_count(model: *const LmdaModelHandle) -> i64 {
    if model.is_null() {
        set_error("null model");
        return -1;
    }
    (*model).inner.param_count() as i64
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lmda_model_free(model: *mut LmdaModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates `model` on `ds`, writing accuracy and Cohen's kappa through
/// the out-pointers. `auc_out` receives the two-class AUC or NaN when it
/// does not apply.
///
/// # Safety
/// Handles must be live; out-pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn lmda_evaluate(
    model: *mut LmdaModelHandle,
    ds: *const LmdaDataset,
    acc_out: *mut c_double,
    kappa_out: *mut c_double,
    auc_out: *mut c_double,
) -> LmdaStatus {
    if model.is_null() || ds.is_null() {
        return fail(LmdaStatus::NullArgument, "null handle");
    }
    match evaluate(&mut (*model).inner, &(*ds).inner, 32) {
        Ok(eval) => {
            if !acc_out.is_null() {
                *acc_out = eval.accuracy;
            }
            if !kappa_out.is_null() {
                *kappa_out = eval.kappa;
            }
            if !auc_out.is_null() {
                *auc_out = eval.auc.unwrap_or(f64::NAN);
            }
            LmdaStatus::Ok
        }
        Err(e) => fail(LmdaStatus::NumericError, e),
    }
}

/// Writes per-trial class probabilities into `out`, which must hold
/// `n_trials * n_classes` doubles (trial-major).
///
/// # Safety
/// Handles must be live; `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lmda_predict_proba(
    model: *mut LmdaModelHandle,
    ds: *const LmdaDataset,
    out: *mut c_double,
    out_len: usize,
) -> LmdaStatus {
    if model.is_null() || ds.is_null() || out.is_null() {
        return fail(LmdaStatus::NullArgument, "null argument");
    }
    let set = &(*ds).inner;
    let k = (*model).inner.config.n_classes;
    let need = set.n_trials() * k;
    if out_len < need {
        return fail(
            LmdaStatus::UsageError,
            format!("output buffer holds {out_len} doubles, need {need}"),
        );
    }
    match predict_probs(&mut (*model).inner, set, 32) {
        Ok(probs) => {
            for (i, row) in probs.iter().enumerate() {
                std::ptr::copy_nonoverlapping(row.as_ptr(), out.add(i * k), k);
            }
            LmdaStatus::Ok
        }
        Err(e) => fail(LmdaStatus::NumericError, e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn synth_train_evaluate_via_c_abi() {
        let train = lmda_dataset_synth_erd(20, 8, 100, 250.0, 0);
        let test = lmda_dataset_synth_erd(10, 8, 100, 250.0, 1);
        assert!(!train.is_null() && !test.is_null());
        unsafe {
            assert_eq!(lmda_dataset_n_trials(train), 40);
            assert_eq!(lmda_dataset_n_channels(train), 8);
            assert_eq!(lmda_dataset_n_classes(train), 2);
            assert_eq!(lmda_dataset_fs_hz(train), 250.0);

            let model = lmda_model_train(train, test, 2, 16, 1e-3, 0, 1, 1);
            assert!(!model.is_null());
            assert!(lmda_model_param_count(model) > 0);

            let (mut acc, mut kappa, mut auc) = (0.0, 0.0, 0.0);
            let st = lmda_evaluate(model, test, &mut acc, &mut kappa, &mut auc);
            assert_eq!(st, LmdaStatus::Ok);
            assert!((0.0..=1.0).contains(&acc));
            assert!(auc.is_finite());

            let mut probs = vec![0.0f64; 20 * 2];
            let st = lmda_predict_proba(model, test, probs.as_mut_ptr(), probs.len());
            assert_eq!(st, LmdaStatus::Ok);
            for row in probs.chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            // checkpoint round trip through the ABI
            let dir = std::env::temp_dir().join(format!("lmda_ffi_{}", std::process::id()));
            std::fs::create_dir_all(&dir).unwrap();
            let path = CString::new(dir.join("m.lmdm").to_str().unwrap()).unwrap();
            assert_eq!(lmda_model_save(model, path.as_ptr()), LmdaStatus::Ok);
            let reloaded = lmda_model_load(path.as_ptr());
            assert!(!reloaded.is_null());
            assert_eq!(lmda_model_param_count(reloaded), lmda_model_param_count(model));

            lmda_model_free(reloaded);
            lmda_model_free(model);
            lmda_dataset_free(train);
            lmda_dataset_free(test);
            let _ = std::fs::remove_dir_all(&dir);
        }
    }

    #[test]
    fn null_handles_are_rejected_with_messages() {
        unsafe {
            assert_eq!(
                lmda_dataset_save(std::ptr::null(), std::ptr::null()),
                LmdaStatus::NullArgument
            );
            assert_eq!(lmda_dataset_n_trials(std::ptr::null()), -1);
            assert_eq!(lmda_model_param_count(std::ptr::null()), -1);

            let missing = CString::new("/nonexistent/file.eegb").unwrap();
            assert!(lmda_dataset_load(missing.as_ptr()).is_null());
            let mut buf = vec![0i8; 256];
            let n = lmda_last_error(buf.as_mut_ptr() as *mut c_char, buf.len());
            assert!(n > 0);
            let msg = CStr::from_ptr(buf.as_ptr() as *const c_char).to_str().unwrap();
            assert!(msg.contains("file.eegb"), "{msg}");

            // freeing null is a no-op
            lmda_dataset_free(std::ptr::null_mut());
            lmda_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn generated_header_is_committed() {
        let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lmda.h")).unwrap();
        for symbol in [
            "lmda_last_error",
            "lmda_dataset_load",
            "lmda_dataset_synth_erd",
            "lmda_model_train",
            "lmda_evaluate",
            "lmda_predict_proba",
            "LmdaStatus",
        ] {
            assert!(header.contains(symbol), "header is missing {symbol}");
        }
    }
}

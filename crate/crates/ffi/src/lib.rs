//! C interface to the separator.
//!
//! Every entry point returns a [`DssStatus`]; on failure
//! [`dss_last_error`] describes the cause. Handles are not thread-safe:
//! use one handle per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dss_core::model::{Checkpoint, DssModel};
use dss_core::DssError;

/// Result codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DssStatus {
    Ok = 0,
    NullPointer = 1,
    ConfigError = 2,
    DataError = 3,
    NumericalError = 4,
    Panic = 5,
}

/// Opaque separator instance.
pub struct DssHandle {
    model: DssModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &DssError) -> DssStatus {
    match e.exit_code() {
        2 => DssStatus::ConfigError,
        4 => DssStatus::NumericalError,
        _ => DssStatus::DataError,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DssStatus, String)>) -> DssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DssStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DssStatus::Panic
        }
    }
}

fn lift(e: DssError) -> (DssStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DssStatus, String) {
    (DssStatus::NullPointer, format!("{what} is null"))
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file. On success `*out` owns a handle that must be
/// released with [`dss_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dss_model_load(path: *const c_char, out: *mut *mut DssHandle) -> DssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DssStatus::ConfigError, "path is not valid UTF-8".to_string()))?;
        let model = Checkpoint::load(Path::new(path)).and_then(|c| c.to_model()).map_err(lift)?;
        *out = Box::into_raw(Box::new(DssHandle { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `handle` must come from [`dss_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dss_model_free(handle: *mut DssHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of scalar weights in the model, 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dss_model_num_params(handle: *const DssHandle) -> u64 {
    handle.as_ref().map_or(0, |h| h.model.num_params() as u64)
}

/// Separates `len` samples of 16 kHz mono audio. Both outputs receive
/// `len` samples.
///
/// # Safety
/// `input` must hold `len` readable floats; `out_near` and `out_far` must
/// each hold `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dss_separate(
    handle: *const DssHandle,
    input: *const f32,
    len: usize,
    out_near: *mut f32,
    out_far: *mut f32,
) -> DssStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if out_near.is_null() || out_far.is_null() {
            return Err(null("output buffer"));
        }
        let x: Vec<f64> = std::slice::from_raw_parts(input, len).iter().map(|&v| v as f64).collect();
        let (near, far) = h.model.separate(&x).map_err(lift)?;
        let near_out = std::slice::from_raw_parts_mut(out_near, len);
        let far_out = std::slice::from_raw_parts_mut(out_far, len);
        for i in 0..len {
            near_out[i] = near[i] as f32;
            far_out[i] = far[i] as f32;
        }
        Ok(())
    })
}

//! C ABI for the bhpm library.
//!
//! Conventions:
//! * All functions return an error code (`BHPM_OK` = 0 on success); outputs
//!   go through out-pointers.
//! * Models are opaque handles created by [`bhpm_model_load`] and released
//!   by [`bhpm_model_free`].
//! * On failure, a thread-local message is retrievable with
//!   [`bhpm_last_error`].

use bhpm::gproot::svgp_predict;
use bhpm::model::{load_model, BhpmModel};
use libc::{c_char, size_t};
use ndarray::Array2;
use std::cell::RefCell;
use std::ffi::CStr;
use std::path::Path;
use std::ptr;

pub const BHPM_OK: i32 = 0;
pub const BHPM_ERR_NULL_POINTER: i32 = 1;
pub const BHPM_ERR_INVALID_ARGUMENT: i32 = 2;
pub const BHPM_ERR_IO: i32 = 3;
pub const BHPM_ERR_NUMERICAL: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn code_for(err: &bhpm::Error) -> i32 {
    use bhpm::Error::*;
    match err {
        Shape(_) | Invalid(_) => BHPM_ERR_INVALID_ARGUMENT,
        Io(_) | Json(_) | Format(_) => BHPM_ERR_IO,
        _ => BHPM_ERR_NUMERICAL,
    }
}

/// Opaque handle to a loaded model.
pub struct BhpmModelHandle {
    model: BhpmModel,
}

/// Copy the thread-local message for the most recent error into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length,
/// excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn bhpm_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load a model saved by the `train` command from `dir` (UTF-8 path to the
/// model directory). On success writes a handle to `out` which must be
/// released with `bhpm_model_free`.
#[no_mangle]
pub unsafe extern "C" fn bhpm_model_load(
    dir: *const c_char,
    out: *mut *mut BhpmModelHandle,
) -> i32 {
    if dir.is_null() || out.is_null() {
        set_error("null pointer".into());
        return BHPM_ERR_NULL_POINTER;
    }
    let path = match CStr::from_ptr(dir).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("model path is not valid UTF-8".into());
            return BHPM_ERR_INVALID_ARGUMENT;
        }
    };
    match load_model(Path::new(path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(BhpmModelHandle { model }));
            BHPM_OK
        }
        Err(e) => {
            set_error(e.to_string());
            *out = ptr::null_mut();
            code_for(&e)
        }
    }
}

/// Release a model handle. Passing NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn bhpm_model_free(handle: *mut BhpmModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Spatial derivative order K of the learned operator. The root's input
/// dimension is K + 1 (the bundle u, u_x, ..., d^K u/dx^K).
#[no_mangle]
pub unsafe extern "C" fn bhpm_model_order(handle: *const BhpmModelHandle, out: *mut size_t) -> i32 {
    if handle.is_null() || out.is_null() {
        set_error("null pointer".into());
        return BHPM_ERR_NULL_POINTER;
    }
    *out = (*handle).model.k;
    BHPM_OK
}

/// Posterior of the learned operator at `n` derivative bundles.
///
/// `v` is row-major n-by-dim where dim = K + 1; `mean` and `variance` are
/// caller-allocated arrays of length `n` (variance may be NULL if not
/// wanted).
#[no_mangle]
pub unsafe extern "C" fn bhpm_root_predict(
    handle: *const BhpmModelHandle,
    v: *const f64,
    n: size_t,
    dim: size_t,
    mean: *mut f64,
    variance: *mut f64,
) -> i32 {
    if handle.is_null() || v.is_null() || mean.is_null() {
        set_error("null pointer".into());
        return BHPM_ERR_NULL_POINTER;
    }
    let model = &(*handle).model;
    if dim != model.k + 1 {
        set_error(format!(
            "bundle dimension {dim} does not match model input dimension {}",
            model.k + 1
        ));
        return BHPM_ERR_INVALID_ARGUMENT;
    }
    if n == 0 {
        return BHPM_OK;
    }
    let flat = std::slice::from_raw_parts(v, n * dim).to_vec();
    let vmat = match Array2::from_shape_vec((n, dim), flat) {
        Ok(m) => m,
        Err(e) => {
            set_error(e.to_string());
            return BHPM_ERR_INVALID_ARGUMENT;
        }
    };
    match svgp_predict(&model.inducing, &model.hyper, &vmat.view()) {
        Ok((mu, var)) => {
            ptr::copy_nonoverlapping(mu.as_slice().unwrap().as_ptr(), mean, n);
            if !variance.is_null() {
                ptr::copy_nonoverlapping(var.as_slice().unwrap().as_ptr(), variance, n);
            }
            BHPM_OK
        }
        Err(e) => {
            set_error(e.to_string());
            code_for(&e)
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bhpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

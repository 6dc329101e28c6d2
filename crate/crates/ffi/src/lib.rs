//! C ABI over `betel`.
//!
//! Datasets live behind the opaque `BetelDataset` handle. Every fallible call
//! returns a `BetelStatus`; on failure `betel_last_error_message` describes the
//! error on the calling thread. Strings returned through `out_json` pointers
//! are owned by the caller and released with `betel_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use betel::data::load_csv;
use betel::freq::{msc_criteria, two_step_gmm};
use betel::moments::all_masks;
use betel::nalgebra::{DMatrix, DVector};
use betel::{generate_dataset, select_models, test_endogeneity, Dataset, DgpConfig, Error, FitOptions, MomentModel, PriorRecipe, Schema, Verdict};
use serde::Deserialize;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Infeasible = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetelVerdict {
    Exogenous = 0,
    Endogenous = 1,
}

/// Opaque dataset handle.
pub struct BetelDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BetelStatus {
    match e {
        Error::Model { source, .. } => status_of(source),
        _ if e.is_config() => BetelStatus::Config,
        Error::Io(_) | Error::Csv(_) => BetelStatus::Io,
        Error::Argument(_) | Error::Contract(_) | Error::Size(_) | Error::Identification(_) => BetelStatus::InvalidArgument,
        Error::Infeasible(_) | Error::Initialization(_) => BetelStatus::Infeasible,
        _ => BetelStatus::Numeric,
    }
}

fn guard<F: FnOnce() -> Result<(), (BetelStatus, String)>>(f: F) -> BetelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BetelStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            BetelStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (BetelStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BetelStatus, String) {
    (BetelStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (BetelStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (BetelStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn parse_json<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T, (BetelStatus, String)> {
    serde_json::from_str(s).map_err(|e| (BetelStatus::Config, format!("invalid {what}: {e}")))
}

unsafe fn dataset_ref<'a>(ds: *const BetelDataset) -> Result<&'a Dataset, (BetelStatus, String)> {
    ds.as_ref().map(|d| &d.inner).ok_or_else(|| null("dataset"))
}

fn emit_handle(ds: Dataset, out: *mut *mut BetelDataset) {
    let h = Box::into_raw(Box::new(BetelDataset { inner: ds }));
    unsafe { *out = h };
}

fn emit_string(s: String, out: *mut *mut c_char) -> Result<(), (BetelStatus, String)> {
    let c = CString::new(s).map_err(|e| (BetelStatus::Numeric, e.to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RunOptions {
    prior: PriorRecipe,
    fit: FitOptions,
}

unsafe fn options(json: *const c_char) -> Result<RunOptions, (BetelStatus, String)> {
    if json.is_null() {
        return Ok(RunOptions::default());
    }
    let opts: RunOptions = parse_json(read_str(json, "options")?, "options")?;
    opts.prior.validate().map_err(lib_err)?;
    opts.fit.mh.validate().map_err(lib_err)?;
    Ok(opts)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn betel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn betel_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a CSV file. `schema_json` names the columns, for example
/// `{"y": "y", "x": ["x"], "z1": ["const", "z1"], "z2": ["z2"]}`.
///
/// # Safety
/// `path` and `schema_json` must be NUL-terminated strings and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn betel_dataset_load_csv(
    path: *const c_char,
    schema_json: *const c_char,
    out: *mut *mut BetelDataset,
) -> BetelStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = read_str(path, "path")?;
        let schema: Schema = parse_json(read_str(schema_json, "schema")?, "schema")?;
        emit_handle(load_csv(path, &schema).map_err(lib_err)?, out);
        Ok(())
    })
}

/// Draws a dataset from a data generating process given as JSON, for example
/// `{"n": 500, "rho": 0.5, "seed": 1}`.
///
/// # Safety
/// `dgp_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn betel_dataset_simulate(dgp_json: *const c_char, out: *mut *mut BetelDataset) -> BetelStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: DgpConfig = parse_json(read_str(dgp_json, "dgp")?, "dgp")?;
        emit_handle(generate_dataset(&cfg).map_err(lib_err)?, out);
        Ok(())
    })
}

/// Builds a dataset from column-major arrays of `n` rows; `x`, `z1` and `z2`
/// have `dx`, `dz1` and `dz2` columns.
///
/// # Safety
/// Each array must hold `n` times its column count doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn betel_dataset_from_arrays(
    n: usize,
    y: *const f64,
    x: *const f64,
    dx: usize,
    z1: *const f64,
    dz1: usize,
    z2: *const f64,
    dz2: usize,
    out: *mut *mut BetelDataset,
) -> BetelStatus {
    guard(|| {
        if out.is_null() || y.is_null() || x.is_null() || z2.is_null() || (z1.is_null() && dz1 > 0) {
            return Err(null("array argument"));
        }
        let mat = |p: *const f64, cols: usize| {
            if cols == 0 {
                DMatrix::zeros(n, 0)
            } else {
                DMatrix::from_column_slice(n, cols, std::slice::from_raw_parts(p, n * cols))
            }
        };
        let ds = Dataset::from_columns(
            DVector::from_column_slice(std::slice::from_raw_parts(y, n)),
            mat(x, dx),
            mat(z1, dz1),
            mat(z2, dz2),
        )
        .map_err(lib_err)?;
        emit_handle(ds, out);
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn betel_dataset_n(ds: *const BetelDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n())
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn betel_dataset_free(ds: *mut BetelDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Bayes-factor endogeneity test. `options_json` may be null or hold
/// `{"prior": ..., "fit": ...}`.
///
/// # Safety
/// `ds` must be a live handle, `options_json` null or a NUL-terminated
/// string, and the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn betel_test_endogeneity(
    ds: *const BetelDataset,
    options_json: *const c_char,
    out_log_bf: *mut f64,
    out_verdict: *mut BetelVerdict,
) -> BetelStatus {
    guard(|| {
        let ds = dataset_ref(ds)?;
        if out_log_bf.is_null() || out_verdict.is_null() {
            return Err(null("out"));
        }
        let opts = options(options_json)?;
        let t = test_endogeneity(ds, &opts.prior, &opts.fit).map_err(lib_err)?;
        *out_log_bf = t.log_bf_eb;
        *out_verdict = match t.verdict {
            Verdict::Endogenous => BetelVerdict::Endogenous,
            Verdict::Exogenous => BetelVerdict::Exogenous,
        };
        Ok(())
    })
}

/// Ranks every endogeneity mask by marginal likelihood; the report is
/// written to `out_json`.
///
/// # Safety
/// As for `betel_test_endogeneity`; free the result with `betel_string_free`.
#[no_mangle]
pub unsafe extern "C" fn betel_select_models(
    ds: *const BetelDataset,
    options_json: *const c_char,
    out_json: *mut *mut c_char,
) -> BetelStatus {
    guard(|| {
        let ds = dataset_ref(ds)?;
        if out_json.is_null() {
            return Err(null("out"));
        }
        let opts = options(options_json)?;
        let models = all_masks(ds.dx())
            .into_iter()
            .map(|m| MomentModel::for_dataset(ds, m))
            .collect::<betel::Result<Vec<_>>>()
            .map_err(lib_err)?;
        let report = select_models(ds, &models, &opts.prior, &opts.fit).map_err(lib_err)?;
        emit_string(serde_json::to_string(&report).map_err(|e| lib_err(e.into()))?, out_json)
    })
}

/// GMM-BIC, AIC and HQIC over every endogeneity mask; the report is
/// written to `out_json`.
///
/// # Safety
/// `ds` must be a live handle and `out_json` valid; free the result with
/// `betel_string_free`.
#[no_mangle]
pub unsafe extern "C" fn betel_gmm_msc(ds: *const BetelDataset, out_json: *mut *mut c_char) -> BetelStatus {
    guard(|| {
        let ds = dataset_ref(ds)?;
        if out_json.is_null() {
            return Err(null("out"));
        }
        let fits = all_masks(ds.dx())
            .into_iter()
            .map(|m| {
                let model = MomentModel::for_dataset(ds, m)?;
                two_step_gmm(&model, ds).map_err(|e| e.in_model(model.label()))
            })
            .collect::<betel::Result<Vec<_>>>()
            .map_err(lib_err)?;
        let report = msc_criteria(&fits, ds.n_blocks()).map_err(lib_err)?;
        emit_string(serde_json::to_string(&report).map_err(|e| lib_err(e.into()))?, out_json)
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn betel_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Config("x".into())), BetelStatus::Config);
        assert_eq!(status_of(&Error::Argument("x".into())), BetelStatus::InvalidArgument);
        assert_eq!(status_of(&Error::Numeric("x".into()).in_model("base")), BetelStatus::Numeric);
        assert_eq!(status_of(&Error::Infeasible("x".into())), BetelStatus::Infeasible);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, BetelStatus::Panic);
        let msg = unsafe { CStr::from_ptr(betel_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("boom"));
    }
}

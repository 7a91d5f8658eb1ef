//! C interface to `cdsl-lab`.
//!
//! Every fallible function returns a [`CdslStatus`]; on failure the message
//! is available from [`cdsl_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cdsl_lab::cli::{apply_override, parse_config_text, run_one};
use cdsl_lab::protocol::results::write_results;
use cdsl_lab::protocol::{compute_metrics, run_stationary, AccuracyMatrix, RunConfig, RunOutput};
use cdsl_lab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdslStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Invalid configuration or input.
    Config = 3,
    /// The computation failed.
    Runtime = 4,
    OutOfRange = 5,
    /// The requested metric is undefined, e.g. TDG of the first domain.
    Absent = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdslMetric {
    Tdg = 0,
    Tda = 1,
    Fa = 2,
}

/// Opaque run configuration.
pub struct CdslConfig {
    cfg: RunConfig,
}

/// Opaque result of a run.
pub struct CdslResult {
    cfg: RunConfig,
    out: RunOutput,
    stationary_accuracy: Option<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: CdslStatus, msg: impl Into<String>) -> CdslStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> CdslStatus {
    let status = if e.is_usage() { CdslStatus::Config } else { CdslStatus::Runtime };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> CdslStatus) -> CdslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == CdslStatus::Ok {
                set_error("");
            }
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(CdslStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, CdslStatus> {
    if s.is_null() {
        return Err(fail(CdslStatus::NullArgument, "string argument is null"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(CdslStatus::InvalidUtf8, "string argument is not UTF-8"))
}

macro_rules! check_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(CdslStatus::NullArgument, concat!(stringify!($p), " is null"));
        })+
    };
}

macro_rules! attempt {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn cdsl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cdsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration holding the defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cdsl_config_default(out: *mut *mut CdslConfig) -> CdslStatus {
    check_null!(out);
    guard(|| {
        *out = Box::into_raw(Box::new(CdslConfig { cfg: RunConfig::default() }));
        CdslStatus::Ok
    })
}

/// Parses a configuration document, TOML unless `json` is nonzero. Keys that
/// are absent keep their defaults; unknown keys are rejected.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_config_parse(text: *const c_char, json: i32, out: *mut *mut CdslConfig) -> CdslStatus {
    check_null!(out);
    let text = attempt!(read_str(text));
    guard(|| match parse_config_text(text, json != 0) {
        Ok((cfg, _)) => {
            *out = Box::into_raw(Box::new(CdslConfig { cfg }));
            CdslStatus::Ok
        }
        Err(msg) => fail(CdslStatus::Config, msg),
    })
}

/// Applies one `key=value` override; dotted keys reach nested tables.
///
/// # Safety
/// `cfg` must come from this library and `item` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cdsl_config_set(cfg: *mut CdslConfig, item: *const c_char) -> CdslStatus {
    check_null!(cfg);
    let item = attempt!(read_str(item));
    guard(|| match apply_override(&(*cfg).cfg, item) {
        Ok(c) => {
            (*cfg).cfg = c;
            CdslStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

/// Checks the configuration without running it.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn cdsl_config_validate(cfg: *const CdslConfig) -> CdslStatus {
    check_null!(cfg);
    guard(|| match (*cfg).cfg.validate() {
        Ok(()) => CdslStatus::Ok,
        Err(e) => from_error(e),
    })
}

/// Serializes the full configuration as JSON. Free the string with
/// [`cdsl_string_free`].
///
/// # Safety
/// `cfg` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_config_to_json(cfg: *const CdslConfig, out: *mut *mut c_char) -> CdslStatus {
    check_null!(cfg, out);
    guard(|| match cdsl_lab_json(&(*cfg).cfg) {
        Ok(s) => {
            *out = s.into_raw();
            CdslStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

fn cdsl_lab_json(cfg: &RunConfig) -> cdsl_lab::Result<CString> {
    let s = serde_json::to_string_pretty(cfg)?;
    Ok(CString::new(s).expect("JSON has no NUL bytes"))
}

/// # Safety
/// `cfg` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdsl_config_free(cfg: *mut CdslConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `s` must be a string returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn cdsl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the continual protocol, or the stationary mode when the
/// configuration sets `stationary`.
///
/// # Safety
/// `cfg` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_run(cfg: *const CdslConfig, out: *mut *mut CdslResult) -> CdslStatus {
    check_null!(cfg, out);
    guard(|| {
        let cfg = &(*cfg).cfg;
        match run_one(cfg) {
            Ok(run) => {
                let stationary_accuracy = cfg.stationary.then(|| run.matrix.get(1, 1));
                *out = Box::into_raw(Box::new(CdslResult { cfg: cfg.clone(), out: run, stationary_accuracy }));
                CdslStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Adapts from the first to the second domain of the configured sequence
/// without memory or distillation. The sequence must have exactly two
/// domains.
///
/// # Safety
/// `cfg` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_run_stationary(cfg: *const CdslConfig, out: *mut *mut CdslResult) -> CdslStatus {
    check_null!(cfg, out);
    guard(|| {
        let cfg = &(*cfg).cfg;
        let seq = match cfg.resolve_sequence() {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        if seq.domains.len() != 2 {
            return fail(
                CdslStatus::Config,
                format!("stationary mode needs exactly 2 domains, sequence has {}", seq.domains.len()),
            );
        }
        match run_stationary(cfg, &seq.domains[0], &seq.domains[1]) {
            Ok(st) => {
                let cfg = RunConfig { stationary: true, ..cfg.clone() };
                *out = Box::into_raw(Box::new(CdslResult { cfg, out: st.run, stationary_accuracy: Some(st.accuracy) }));
                CdslStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `res` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_domain_count(res: *const CdslResult, out: *mut usize) -> CdslStatus {
    check_null!(res, out);
    *out = (*res).out.matrix.domains.len();
    set_error("");
    CdslStatus::Ok
}

/// Number of matrix rows, one per training stage.
///
/// # Safety
/// `res` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_stage_count(res: *const CdslResult, out: *mut usize) -> CdslStatus {
    check_null!(res, out);
    *out = (*res).out.matrix.rows.len();
    set_error("");
    CdslStatus::Ok
}

/// Accuracy on `domain` after training stage `stage`.
///
/// # Safety
/// `res` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_matrix_get(
    res: *const CdslResult,
    stage: usize,
    domain: usize,
    out: *mut f64,
) -> CdslStatus {
    check_null!(res, out);
    let m = &(*res).out.matrix;
    match m.rows.get(stage).and_then(|r| r.get(domain)) {
        Some(&v) => {
            *out = v;
            set_error("");
            CdslStatus::Ok
        }
        None => fail(CdslStatus::OutOfRange, format!("no matrix entry ({stage}, {domain})")),
    }
}

/// Per-domain metric. Returns `Absent` when the metric has no samples, as
/// for TDG of the first domain or FA of the last.
///
/// # Safety
/// `res` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_metric(
    res: *const CdslResult,
    metric: CdslMetric,
    domain: usize,
    out: *mut f64,
) -> CdslStatus {
    check_null!(res, out);
    let m = &(*res).out.metrics;
    let n = m.domains.len();
    if domain >= n {
        return fail(CdslStatus::OutOfRange, format!("domain {domain} out of range for {n} domains"));
    }
    let v = match metric {
        CdslMetric::Tdg => m.tdg[domain],
        CdslMetric::Tda => Some(m.tda[domain]),
        CdslMetric::Fa => m.fa[domain],
    };
    store(v, out, || format!("{metric:?} of domain {domain} is undefined"))
}

/// Average of a metric over the domains where it is defined.
///
/// # Safety
/// `res` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_average(res: *const CdslResult, metric: CdslMetric, out: *mut f64) -> CdslStatus {
    check_null!(res, out);
    let m = &(*res).out.metrics;
    let v = match metric {
        CdslMetric::Tdg => m.avg_tdg,
        CdslMetric::Tda => Some(m.avg_tda),
        CdslMetric::Fa => m.avg_fa,
    };
    store(v, out, || format!("average {metric:?} is undefined"))
}

/// Target accuracy of a stationary run; `Absent` for continual runs.
///
/// # Safety
/// `res` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_stationary_accuracy(res: *const CdslResult, out: *mut f64) -> CdslStatus {
    check_null!(res, out);
    store((*res).stationary_accuracy, out, || "not a stationary run".to_string())
}

unsafe fn store(v: Option<f64>, out: *mut f64, absent: impl FnOnce() -> String) -> CdslStatus {
    match v {
        Some(v) => {
            *out = v;
            set_error("");
            CdslStatus::Ok
        }
        None => fail(CdslStatus::Absent, absent()),
    }
}

/// Writes the results directory layout (matrix, metrics, log, resolved
/// config) under `dir`.
///
/// # Safety
/// `res` must come from this library and `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_write(res: *const CdslResult, dir: *const c_char) -> CdslStatus {
    check_null!(res);
    let dir = attempt!(read_str(dir));
    guard(|| match write_results(Path::new(dir), &(*res).cfg, &(*res).out) {
        Ok(()) => CdslStatus::Ok,
        Err(e) => from_error(e),
    })
}

/// # Safety
/// `res` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdsl_result_free(res: *mut CdslResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Metrics of an `n`×`n` row-major accuracy matrix. Each output array has
/// `n` entries; undefined entries (TDG of domain 0, FA of domain n-1) are
/// written as NaN.
///
/// # Safety
/// `matrix` must hold `n*n` values and each output array `n` writable values.
#[no_mangle]
pub unsafe extern "C" fn cdsl_compute_metrics(
    matrix: *const f64,
    n: usize,
    tdg: *mut f64,
    tda: *mut f64,
    fa: *mut f64,
) -> CdslStatus {
    check_null!(matrix, tdg, tda, fa);
    if n == 0 {
        return fail(CdslStatus::Config, "matrix is empty");
    }
    let Some(len) = n.checked_mul(n) else {
        return fail(CdslStatus::OutOfRange, "matrix size overflows");
    };
    let values = std::slice::from_raw_parts(matrix, len);
    guard(|| {
        let mut m = AccuracyMatrix::new((0..n).map(|i| format!("d{i}")).collect());
        for row in values.chunks(n) {
            if let Err(e) = m.push_row(row.to_vec()) {
                return from_error(e);
            }
        }
        let report = match compute_metrics(&m) {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        for j in 0..n {
            *tdg.add(j) = report.tdg[j].unwrap_or(f64::NAN);
            *tda.add(j) = report.tda[j];
            *fa.add(j) = report.fa[j].unwrap_or(f64::NAN);
        }
        CdslStatus::Ok
    })
}

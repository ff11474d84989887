//! C ABI over `delay-smp`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a [`DsStatus`]
//! and stores a message retrievable with [`ds_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use delay_smp::config::LoadedConfig;
use delay_smp::forward::{ControlProcess, NoiseEnsemble, Problem};
use delay_smp::scenarios::REGISTRY;
use delay_smp::smp::{cost, expected_gradient, state_and_adjoint};

/// Result codes. `Numerical` and `Config` match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    Numerical = 1,
    Config = 2,
    NullArgument = 3,
    InvalidUtf8 = 4,
    Io = 5,
    LengthMismatch = 6,
    Panic = 7,
}

/// Parsed and validated experiment configuration.
pub struct DsConfig {
    inner: LoadedConfig,
}

/// Control problem built from a configuration, with its noise ensemble.
pub struct DsProblem {
    problem: Problem,
    noise: Option<NoiseEnsemble>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &delay_smp::Error) -> DsStatus {
    match e {
        delay_smp::Error::Config(_) => DsStatus::Config,
        delay_smp::Error::Io(_) => DsStatus::Io,
        _ => DsStatus::Numerical,
    }
}

fn fail(e: impl Into<delay_smp::Error>) -> DsStatus {
    let e = e.into();
    set_error(e.to_string());
    status_of(&e)
}

fn guard(f: impl FnOnce() -> DsStatus) -> DsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            DsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DsStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(DsStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        DsStatus::InvalidUtf8
    })
}

unsafe fn overrides_arg(list: *const *const c_char, len: usize) -> Result<Vec<String>, DsStatus> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if list.is_null() {
        set_error("overrides is null");
        return Err(DsStatus::NullArgument);
    }
    std::slice::from_raw_parts(list, len)
        .iter()
        .map(|p| str_arg(*p, "override").map(str::to_string))
        .collect()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of registered scenarios.
#[no_mangle]
pub extern "C" fn ds_scenario_count() -> usize {
    REGISTRY.len()
}

/// Name of scenario `index` (static string), or null when out of range.
#[no_mangle]
pub extern "C" fn ds_scenario_name(index: usize) -> *const c_char {
    static NAMES: std::sync::OnceLock<Vec<CString>> = std::sync::OnceLock::new();
    let names = NAMES.get_or_init(|| {
        REGISTRY
            .iter()
            .map(|s| CString::new(s.name).unwrap())
            .collect()
    });
    names.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// Parses a TOML configuration and applies `key=value` overrides.
///
/// # Safety
/// `source` must be a NUL-terminated string, `overrides` an array of
/// `n_overrides` such strings (may be null when zero), `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_config_from_toml(
    source: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut DsConfig,
) -> DsStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return DsStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let src = match str_arg(source, "source") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let ov = match overrides_arg(overrides, n_overrides) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match LoadedConfig::from_str(src, &ov) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DsConfig { inner }));
                DsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Reads and parses a configuration file.
///
/// # Safety
/// As for [`ds_config_from_toml`], with `path` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn ds_config_from_path(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut DsConfig,
) -> DsStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return DsStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let p = match str_arg(path, "path") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let ov = match overrides_arg(overrides, n_overrides) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match LoadedConfig::from_path(Path::new(p), &ov) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DsConfig { inner }));
                DsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `config` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_config_free(config: *mut DsConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Copies the scenario name into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full name length excluding the terminator.
///
/// # Safety
/// `config` must be valid; `buf` must hold `len` bytes or be null with `len = 0`.
#[no_mangle]
pub unsafe extern "C" fn ds_config_scenario(
    config: *const DsConfig,
    buf: *mut c_char,
    len: usize,
) -> usize {
    let Some(c) = config.as_ref() else { return 0 };
    let name = c.inner.config.scenario.as_bytes();
    if !buf.is_null() && len > 0 {
        let n = name.len().min(len - 1);
        ptr::copy_nonoverlapping(name.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
    }
    name.len()
}

/// Runs the configured scenario, writing its artifacts into `out_dir`.
///
/// # Safety
/// `config` must be valid and `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn ds_run(config: *const DsConfig, out_dir: *const c_char) -> DsStatus {
    guard(|| {
        let Some(c) = config.as_ref() else {
            set_error("config is null");
            return DsStatus::NullArgument;
        };
        let dir = match str_arg(out_dir, "out_dir") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match delay_smp::run_experiment(&c.inner, Path::new(dir)) {
            Ok(_) => DsStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Builds the control problem and its noise ensemble from a configuration.
///
/// # Safety
/// `config` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_problem_new(
    config: *const DsConfig,
    out: *mut *mut DsProblem,
) -> DsStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return DsStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let Some(c) = config.as_ref() else {
            set_error("config is null");
            return DsStatus::NullArgument;
        };
        match c.inner.problem() {
            Ok(problem) => {
                let noise = c.inner.noise(&problem);
                *out = Box::into_raw(Box::new(DsProblem { problem, noise }));
                DsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `problem` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_problem_free(problem: *mut DsProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of control intervals `K`.
///
/// # Safety
/// `problem` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ds_problem_steps(problem: *const DsProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.grid.steps)
}

/// Values per control interval.
///
/// # Safety
/// `problem` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ds_problem_control_dim(problem: *const DsProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.control_dim())
}

/// Time step of the problem grid.
///
/// # Safety
/// `problem` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ds_problem_dt(problem: *const DsProblem) -> f64 {
    problem.as_ref().map_or(f64::NAN, |p| p.problem.grid.dt)
}

unsafe fn control_arg(
    p: &DsProblem,
    u: *const f64,
    len: usize,
) -> Result<ControlProcess, DsStatus> {
    let dim = p.problem.control_dim();
    let want = p.problem.grid.steps * dim;
    if u.is_null() {
        set_error("control is null");
        return Err(DsStatus::NullArgument);
    }
    if len != want {
        set_error(format!(
            "control has {len} values, expected steps * dim = {want}"
        ));
        return Err(DsStatus::LengthMismatch);
    }
    Ok(ControlProcess {
        dim,
        values: std::slice::from_raw_parts(u, len).to_vec(),
    })
}

/// Monte Carlo cost of the control `u` (row-major, `steps * dim` values).
///
/// # Safety
/// `problem` valid, `u` readable for `len` values, `mean` and `stderr_out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_cost(
    problem: *const DsProblem,
    u: *const f64,
    len: usize,
    mean: *mut f64,
    stderr_out: *mut f64,
) -> DsStatus {
    guard(|| {
        let Some(p) = problem.as_ref() else {
            set_error("problem is null");
            return DsStatus::NullArgument;
        };
        if mean.is_null() || stderr_out.is_null() {
            set_error("output pointer is null");
            return DsStatus::NullArgument;
        }
        let u = match control_arg(p, u, len) {
            Ok(u) => u,
            Err(s) => return s,
        };
        match cost(&p.problem, &u, p.noise.as_ref()) {
            Ok(e) => {
                *mean = e.mean;
                *stderr_out = e.stderr;
                DsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Expected Hamiltonian gradient `E D_uH(t_n)` at `u`, written to `grad`
/// (same layout and length as `u`).
///
/// # Safety
/// `problem` valid, `u` readable and `grad` writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn ds_gradient(
    problem: *const DsProblem,
    u: *const f64,
    len: usize,
    grad: *mut f64,
) -> DsStatus {
    guard(|| {
        let Some(p) = problem.as_ref() else {
            set_error("problem is null");
            return DsStatus::NullArgument;
        };
        if grad.is_null() {
            set_error("grad is null");
            return DsStatus::NullArgument;
        }
        let u = match control_arg(p, u, len) {
            Ok(u) => u,
            Err(s) => return s,
        };
        match state_and_adjoint(&p.problem, &u, p.noise.as_ref()) {
            Ok((_, adj)) => {
                let g = expected_gradient(&p.problem, &adj, &u);
                std::slice::from_raw_parts_mut(grad, len).copy_from_slice(&g.values);
                DsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

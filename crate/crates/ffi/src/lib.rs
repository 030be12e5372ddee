//! C ABI for `jumpest`.
//!
//! Every object is an opaque heap handle released by its `*_free` function.
//! Fallible calls return a [`JeStatus`] and write results through out
//! pointers; on failure [`je_last_error_message`] describes the problem. The
//! message is thread-local and stays valid until the next failing call on
//! the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use jumpest::config::{Config, EfSection};
use jumpest::estfun::EstimatingFunction;
use jumpest::simulate::{simulate_path_from, ObservationPath, SamplingScheme};
use jumpest::solve::{multi_start_solve, EstimationResult};
use jumpest::{Error, JumpDiffusionModel};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    NotAvailable = 6,
    BufferTooSmall = 7,
    Io = 8,
    Panic = 9,
}

/// A model together with its simulation, solver and quadrature settings.
pub struct JeModel {
    cfg: Config,
    model: JumpDiffusionModel,
}

/// A discretely observed path on a uniform grid.
pub struct JePath {
    path: ObservationPath,
}

/// Outcome of an estimation run.
pub struct JeEstimate {
    result: EstimationResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> JeStatus {
    match e {
        Error::Config(_) => JeStatus::Config,
        Error::Data { .. } | Error::NonuniformGrid { .. } | Error::EmptyData => JeStatus::Data,
        Error::Io(_) => JeStatus::Io,
        Error::Invalid(_) | Error::DimensionMismatch(_) | Error::ParameterOutsideBox(_) => JeStatus::InvalidArgument,
        _ => JeStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (JeStatus, String)>) -> JeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            JeStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (JeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (JeStatus, String) {
    (JeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (JeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (JeStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn read_slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (JeStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn copy_into(src: &[f64], buf: *mut f64, cap: usize) -> Result<(), (JeStatus, String)> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if cap < src.len() {
        return Err((JeStatus::BufferTooSmall, format!("buffer holds {cap} values, {} needed", src.len())));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

fn model_from(cfg: Config) -> Result<JeModel, (JeStatus, String)> {
    let model = cfg.build_model().map_err(lib_err)?;
    Ok(JeModel { cfg, model })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn je_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none.
#[no_mangle]
pub extern "C" fn je_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Built-in model by name (`ou_additive_jumps`, `quadratic_ef_model`,
/// `driftjump_known_diffusion`) with default settings.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn je_model_new_builtin(name: *const c_char, out: *mut *mut JeModel) -> JeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = read_str(name, "name")?;
        let cfg = Config::for_model(name);
        cfg.validate().map_err(lib_err)?;
        write_out(out, model_from(cfg)?);
        Ok(())
    })
}

/// Model from a JSON configuration document, as accepted by the CLI.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn je_model_from_json(json: *const c_char, out: *mut *mut JeModel) -> JeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = Config::from_json(read_str(json, "json")?).map_err(lib_err)?;
        write_out(out, model_from(cfg)?);
        Ok(())
    })
}

/// Parameter dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn je_model_dim(model: *const JeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.dim())
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn je_model_free(model: *mut JeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Simulates `n` steps of size `delta` at `theta` (length `je_model_dim`).
/// Substeps, burn-in and start point come from the model configuration.
///
/// # Safety
/// Pointers must be valid; `theta` must hold `theta_len` values.
#[no_mangle]
pub unsafe extern "C" fn je_simulate(
    model: *const JeModel,
    theta: *const f64,
    theta_len: usize,
    n: usize,
    delta: f64,
    seed: u64,
    out: *mut *mut JePath,
) -> JeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let theta = read_slice(theta, theta_len, "theta")?;
        let scheme = SamplingScheme::new(n, delta).map_err(lib_err)?;
        let sim = &m.cfg.sim;
        let path = simulate_path_from(&m.model, theta, scheme, sim.start(), sim.substeps, seed).map_err(lib_err)?;
        write_out(out, JePath { path });
        Ok(())
    })
}

/// Wraps caller-supplied observations `x_0, …, x_{len-1}` spaced `delta` apart.
///
/// # Safety
/// `values` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn je_path_from_values(values: *const f64, len: usize, delta: f64, out: *mut *mut JePath) -> JeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = read_slice(values, len, "values")?;
        let path = ObservationPath::from_values(v.to_vec(), delta).map_err(lib_err)?;
        write_out(out, JePath { path });
        Ok(())
    })
}

/// Number of stored observations (`n + 1`), or 0 for a null handle.
///
/// # Safety
/// `path` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn je_path_len(path: *const JePath) -> usize {
    path.as_ref().map_or(0, |p| p.path.values.len())
}

/// Sampling interval, or NaN for a null handle.
///
/// # Safety
/// `path` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn je_path_delta(path: *const JePath) -> f64 {
    path.as_ref().map_or(f64::NAN, |p| p.path.delta())
}

/// Copies the observations into `buf`, which must hold `je_path_len` values.
///
/// # Safety
/// `buf` must be writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn je_path_values(path: *const JePath, buf: *mut f64, cap: usize) -> JeStatus {
    guard(|| {
        let p = path.as_ref().ok_or_else(|| null("path"))?;
        copy_into(&p.path.values, buf, cap)
    })
}

/// # Safety
/// `path` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn je_path_free(path: *mut JePath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

/// Multi-start root search for the named estimating function. A null `ef`
/// uses the one in the model configuration.
///
/// # Safety
/// Handles must be live; `ef` must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn je_estimate(
    model: *const JeModel,
    path: *const JePath,
    ef: *const c_char,
    out: *mut *mut JeEstimate,
) -> JeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = path.as_ref().ok_or_else(|| null("path"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = m.cfg.clone();
        if !ef.is_null() {
            cfg.ef = Some(EfSection::named(read_str(ef, "ef")?));
        }
        let est: Arc<dyn EstimatingFunction> = cfg.build_ef(&m.model).map_err(lib_err)?;
        for (i, x) in p.path.values.iter().enumerate() {
            if !m.model.state_space.contains(*x) {
                return Err((JeStatus::Data, format!("observation {i} = {x} lies outside the state space")));
            }
        }
        let search = cfg.estimate.search_box.as_ref().map(|b| b.to_box(m.model.d1())).transpose().map_err(lib_err)?;
        let result = multi_start_solve(est.as_ref(), &p.path, &cfg.starts(), &m.model.param_box, search.as_ref(), &cfg.solver)
            .map_err(lib_err)?;
        write_out(out, JeEstimate { result });
        Ok(())
    })
}

/// Dimension of θ̂, or 0 for a null handle.
///
/// # Safety
/// `est` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn je_estimate_dim(est: *const JeEstimate) -> usize {
    est.as_ref().map_or(0, |e| e.result.theta_hat.to_vec().len())
}

/// 1 if Newton converged, 0 otherwise or for a null handle.
///
/// # Safety
/// `est` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn je_estimate_converged(est: *const JeEstimate) -> i32 {
    est.as_ref().map_or(0, |e| e.result.converged as i32)
}

/// Copies θ̂ into `buf`.
///
/// # Safety
/// `buf` must be writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn je_estimate_theta(est: *const JeEstimate, buf: *mut f64, cap: usize) -> JeStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("estimate"))?;
        copy_into(&e.result.theta_hat.to_vec(), buf, cap)
    })
}

/// Copies the standard errors into `buf`; `NotAvailable` when no variance
/// could be formed.
///
/// # Safety
/// `buf` must be writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn je_estimate_std_errors(est: *const JeEstimate, buf: *mut f64, cap: usize) -> JeStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("estimate"))?;
        match &e.result.std_errors {
            Some(se) => copy_into(se, buf, cap),
            None => Err((
                JeStatus::NotAvailable,
                e.result.variance_error.clone().unwrap_or_else(|| "no standard errors".into()),
            )),
        }
    })
}

/// # Safety
/// `est` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn je_estimate_free(est: *mut JeEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

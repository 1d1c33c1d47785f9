//! C ABI over the intertwine library.
//!
//! Every entry point returns an [`IntertwineStatus`]; results go through out
//! pointers. Objects are opaque handles released by their `_free` function.
//! The message of the most recent failure on the calling thread is available
//! from [`intertwine_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use intertwine::config::RunConfig;
use intertwine::model::{bakry_emery_at, rho_inf};
use intertwine::run::run;
use intertwine::spectral::{discretize, spectral_gap, GapGrid};
use intertwine::twistcalc::{bound_scan, BoundMode, Twist, TwistSpec};
use intertwine::{ChartPoint, Error, ManifoldSpec, ModelSpec, Region};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntertwineStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Domain = 4,
    Numeric = 5,
    Config = 6,
    TwistSingular = 7,
    Mode = 8,
    Degenerate = 9,
    Precondition = 10,
    Io = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntertwineMode {
    Plain = 0,
    Tilde = 1,
}

/// Opaque model handle.
pub struct IntertwineModel {
    inner: ModelSpec,
}

/// Opaque twist handle.
pub struct IntertwineTwist {
    inner: Twist,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IntertwineStatus {
    match e {
        Error::Parse { .. } => IntertwineStatus::Parse,
        Error::Domain { .. } => IntertwineStatus::Domain,
        Error::Numeric(_) => IntertwineStatus::Numeric,
        Error::Config(_) => IntertwineStatus::Config,
        Error::TwistSingular { .. } => IntertwineStatus::TwistSingular,
        Error::Mode(_) => IntertwineStatus::Mode,
        Error::Degenerate(_) => IntertwineStatus::Degenerate,
        Error::Precondition(_) => IntertwineStatus::Precondition,
        Error::Io(_) => IntertwineStatus::Io,
    }
}

enum Failure {
    Status(IntertwineStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard<F>(f: F) -> IntertwineStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IntertwineStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            IntertwineStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(IntertwineStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(IntertwineStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn intertwine_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn intertwine_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Model on Euclidean space of dimension `dim` with potential `potential`
/// and a scan grid given by `lower`, `upper` and `points`, each of length `dim`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `potential` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn intertwine_model_euclidean(
    dim: usize,
    potential: *const c_char,
    lower: *const f64,
    upper: *const f64,
    points: *const usize,
    out: *mut *mut IntertwineModel,
) -> IntertwineStatus {
    guard(|| {
        let v = text(potential, "potential")?;
        let region = Region::new(
            slice(lower, dim, "lower")?,
            slice(upper, dim, "upper")?,
            slice(points, dim, "points")?,
        );
        let model = ModelSpec::new(ManifoldSpec::euclidean(dim), v, region)?;
        put(out, Box::into_raw(Box::new(IntertwineModel { inner: model })), "out")
    })
}

/// Model described by the `[model]` table of a run configuration.
///
/// # Safety
/// `config_toml` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_model_from_config(
    config_toml: *const c_char,
    out: *mut *mut IntertwineModel,
) -> IntertwineStatus {
    guard(|| {
        let cfg = RunConfig::from_toml(text(config_toml, "config_toml")?)?;
        let prepared = cfg.validate()?;
        put(
            out,
            Box::into_raw(Box::new(IntertwineModel { inner: prepared.model })),
            "out",
        )
    })
}

/// # Safety
/// `model` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn intertwine_model_free(model: *mut IntertwineModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_model_dim(model: *const IntertwineModel, out: *mut usize) -> IntertwineStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        put(out, m.inner.dim(), "out")
    })
}

/// Infimum over the model region of the smallest Bakry–Émery eigenvalue.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_rho_inf(model: *const IntertwineModel, out: *mut f64) -> IntertwineStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        put(out, rho_inf(&m.inner)?.value, "out")
    })
}

/// Smallest eigenvalue of the Bakry–Émery tensor at `x` (length = model dim).
///
/// # Safety
/// `model` is a live handle; `x` holds `dim` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_bakry_emery_min(
    model: *const IntertwineModel,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> IntertwineStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if dim != m.inner.dim() {
            return Err(Error::Config(format!("point has {dim} coordinates, model has {}", m.inner.dim())).into());
        }
        let v = bakry_emery_at(&m.inner, &ChartPoint::new(slice(x, dim, "x")?))?;
        put(out, v.smallest_eigenvalue, "out")
    })
}

/// Discrete spectral gap λ₁ on a grid over the given box.
///
/// # Safety
/// `model` is a live handle; arrays hold `dim` entries; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_spectral_gap(
    model: *const IntertwineModel,
    lower: *const f64,
    upper: *const f64,
    points: *const usize,
    dim: usize,
    out: *mut f64,
) -> IntertwineStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let grid = GapGrid::new(
            slice(lower, dim, "lower")?,
            slice(upper, dim, "upper")?,
            slice(points, dim, "points")?,
        );
        let r = spectral_gap(&discretize(&m.inner, &grid)?)?;
        put(out, r.lambda1, "out")
    })
}

/// Identity twist of dimension `dim`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_twist_identity(dim: usize, out: *mut *mut IntertwineTwist) -> IntertwineStatus {
    guard(|| {
        let t = Twist::compile(&TwistSpec::identity(), dim)?;
        put(out, Box::into_raw(Box::new(IntertwineTwist { inner: t })), "out")
    })
}

/// Scalar twist `B* = λ(x)·id` with parameters `p0, p1, …` bound to `params`.
///
/// # Safety
/// `lambda` is NUL-terminated; `params` holds `n_params` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_twist_scalar(
    dim: usize,
    lambda: *const c_char,
    params: *const f64,
    n_params: usize,
    out: *mut *mut IntertwineTwist,
) -> IntertwineStatus {
    guard(|| {
        let spec = TwistSpec::scalar(text(lambda, "lambda")?).with_parameters(slice(params, n_params, "params")?);
        let t = Twist::compile(&spec, dim)?;
        put(out, Box::into_raw(Box::new(IntertwineTwist { inner: t })), "out")
    })
}

/// Twist from the JSON form of a `TwistSpec`, e.g.
/// `{"family":{"family":"shear","expr":"x"},"parameters":[],"condition_bound":1e8}`.
///
/// # Safety
/// `json` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_twist_from_json(
    dim: usize,
    json: *const c_char,
    out: *mut *mut IntertwineTwist,
) -> IntertwineStatus {
    guard(|| {
        let spec: TwistSpec = serde_json::from_str(text(json, "json")?).map_err(|e| Error::Config(e.to_string()))?;
        let t = Twist::compile(&spec, dim)?;
        put(out, Box::into_raw(Box::new(IntertwineTwist { inner: t })), "out")
    })
}

/// # Safety
/// `twist` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn intertwine_twist_free(twist: *mut IntertwineTwist) {
    if !twist.is_null() {
        drop(Box::from_raw(twist));
    }
}

/// Certified bound `ρ_B` (plain) or `ρ̃_B` (tilde) over the model region.
/// A plain-mode twist with nonzero defect yields `INTERTWINE_STATUS_MODE`.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_bound(
    model: *const IntertwineModel,
    twist: *const IntertwineTwist,
    mode: IntertwineMode,
    out: *mut f64,
) -> IntertwineStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let t = twist.as_ref().ok_or_else(|| null("twist"))?;
        let mode = match mode {
            IntertwineMode::Plain => BoundMode::Plain,
            IntertwineMode::Tilde => BoundMode::Tilde,
        };
        put(out, bound_scan(&m.inner, &t.inner, mode)?.bound(), "out")
    })
}

/// Runs a full TOML configuration and returns the JSON report through
/// `report_json`, to be released with [`intertwine_string_free`]. The exit
/// code the command-line tool would use goes to `exit_code` when non-null.
///
/// # Safety
/// `config_toml` is NUL-terminated; `report_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn intertwine_run_config(
    config_toml: *const c_char,
    report_json: *mut *mut c_char,
    exit_code: *mut i32,
) -> IntertwineStatus {
    guard(|| {
        let cfg = RunConfig::from_toml(text(config_toml, "config_toml")?)?;
        let out = run(&cfg)?;
        let json = CString::new(out.report.to_json()?).map_err(|e| Error::Io(e.to_string()))?;
        if !exit_code.is_null() {
            exit_code.write(out.report.exit_code());
        }
        put(report_json, json.into_raw(), "report_json")
    })
}

/// # Safety
/// `s` is null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn intertwine_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

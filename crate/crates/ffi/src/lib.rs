//! C ABI over `rice-em`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Fallible calls return a [`RiceStatus`]; on
//! failure [`rice_last_error`] describes the cause. Panics never cross the
//! boundary: they surface as `RICE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rice_em::batch::{try_fit_voxel, FitConfig};
use rice_em::io::ResultRow;
use rice_em::report::Method;
use rice_em::scheme::{AcquisitionScheme, Design};
use rice_em::synth::{self, GroundTruth, NoiseLevel};
use rice_em::tensor::{GradientControl, TensorOrder};
use rice_em::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Degenerate = 4,
    Initialization = 5,
    RankDeficient = 6,
    Parse = 7,
    Config = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiceMethod {
    Mle = 0,
    Map = 1,
    Ls = 2,
    LsTrunc = 3,
    Wls = 4,
    WlsTrunc = 5,
    RicianDirect = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiceNoise {
    High = 0,
    Low = 1,
}

/// Fit settings; start from `rice_fit_options_default()`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiceFitOptions {
    pub method: RiceMethod,
    /// 2 or 4.
    pub order: u8,
    pub alpha: f64,
    pub max_em_iters: u32,
    /// b cutoff of the truncated baselines.
    pub b_cutoff: f64,
    /// MAP prior precision `omega_scale * I`.
    pub omega_scale: f64,
    pub c1: f64,
    pub c2: f64,
    pub positivity_projection: bool,
}

/// Acquisition scheme handle.
pub struct RiceScheme {
    inner: AcquisitionScheme,
}

/// Fit result handle.
pub struct RiceFit {
    row: ResultRow,
}

pub const RICE_FLAG_DEGENERATE: u32 = 1;
pub const RICE_FLAG_NON_CONVERGED: u32 = 2;
pub const RICE_FLAG_POSITIVITY_FAIL: u32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RiceStatus {
    match e {
        Error::Domain(_) => RiceStatus::Domain,
        Error::Degenerate(_) => RiceStatus::Degenerate,
        Error::Initialization { .. } => RiceStatus::Initialization,
        Error::RankDeficient(_) => RiceStatus::RankDeficient,
        Error::Invalid(_) => RiceStatus::InvalidArgument,
        Error::Parse { .. } => RiceStatus::Parse,
        Error::Config { .. } => RiceStatus::Config,
        Error::Io { .. } => RiceStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RiceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RiceStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RiceStatus::NullPointer
        }
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            RiceStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RiceStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn order_of(o: u8) -> Result<TensorOrder, Failure> {
    TensorOrder::try_from(o).map_err(|e| Failure::Arg(e.to_string()))
}

fn method_of(m: RiceMethod) -> Method {
    match m {
        RiceMethod::Mle => Method::Mle,
        RiceMethod::Map => Method::Map,
        RiceMethod::Ls => Method::Ls,
        RiceMethod::LsTrunc => Method::LsTrunc,
        RiceMethod::Wls => Method::Wls,
        RiceMethod::WlsTrunc => Method::WlsTrunc,
        RiceMethod::RicianDirect => Method::RicianDirect,
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn rice_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful one. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rice_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// The default 32-direction, 15-knot, 3-repetition scheme (1440 rows).
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn rice_scheme_default(out: *mut *mut RiceScheme) -> RiceStatus {
    guard(|| put(out, RiceScheme { inner: synth::default_scheme() }))
}

/// Factorial scheme: every direction (row-major `n_dirs x 3`) at every knot,
/// repeated `repetitions` times.
///
/// # Safety
/// `dirs` must hold `3 * n_dirs` doubles, `knots` `n_knots` doubles; `out`
/// must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn rice_scheme_factorial(
    dirs: *const f64,
    n_dirs: usize,
    knots: *const f64,
    n_knots: usize,
    repetitions: usize,
    out: *mut *mut RiceScheme,
) -> RiceStatus {
    guard(|| {
        let d = slice(dirs, 3 * n_dirs, "dirs")?;
        let k = slice(knots, n_knots, "knots")?;
        let directions = d.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let inner = AcquisitionScheme::factorial(directions, k.to_vec(), repetitions)?;
        put(out, RiceScheme { inner })
    })
}

/// Scheme from explicit rows: `b[i]` with unit direction `g[3i..3i+3]`.
///
/// # Safety
/// `b` must hold `m` doubles and `g` `3 * m`; `out` must be valid for a
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn rice_scheme_from_rows(b: *const f64, g: *const f64, m: usize, out: *mut *mut RiceScheme) -> RiceStatus {
    guard(|| {
        let b = slice(b, m, "b")?;
        let g = slice(g, 3 * m, "g")?;
        let rows = b
            .iter()
            .zip(g.chunks_exact(3))
            .map(|(b, g)| GradientControl::new(*b, [g[0], g[1], g[2]]))
            .collect::<rice_em::Result<Vec<_>>>()?;
        put(out, RiceScheme { inner: AcquisitionScheme::from_rows(rows)? })
    })
}

/// Number of acquisitions, or 0 for NULL.
///
/// # Safety
/// `scheme` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_scheme_len(scheme: *const RiceScheme) -> usize {
    scheme.as_ref().map_or(0, |s| s.inner.len())
}

/// # Safety
/// `scheme` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rice_scheme_free(scheme: *mut RiceScheme) {
    if !scheme.is_null() {
        drop(Box::from_raw(scheme));
    }
}

/// Draws one synthetic voxel from the shipped ground truth of the given
/// order and noise level into `out[0..m]`.
///
/// # Safety
/// `scheme` must be a live handle and `out` must hold `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn rice_simulate(
    scheme: *const RiceScheme,
    order: u8,
    noise: RiceNoise,
    seed: u64,
    out: *mut f64,
    m: usize,
) -> RiceStatus {
    guard(|| {
        let s = scheme.as_ref().ok_or(Failure::Null("scheme"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if m != s.inner.len() {
            return Err(Failure::Arg(format!("buffer holds {m} values, scheme has {} rows", s.inner.len())));
        }
        let level = match noise {
            RiceNoise::High => NoiseLevel::High,
            RiceNoise::Low => NoiseLevel::Low,
        };
        let truth = GroundTruth::preset(order_of(order)?, level, seed);
        let v = synth::synthesize(&s.inner, &truth);
        std::slice::from_raw_parts_mut(out, m).copy_from_slice(&v.magnitudes);
        Ok(())
    })
}

/// Defaults: ML estimation of an order-2 tensor.
#[no_mangle]
pub extern "C" fn rice_fit_options_default() -> RiceFitOptions {
    let c = FitConfig::default();
    RiceFitOptions {
        method: RiceMethod::Mle,
        order: c.order.as_u8(),
        alpha: c.options.alpha,
        max_em_iters: c.options.max_em_iters as u32,
        b_cutoff: c.b_cutoff,
        omega_scale: c.omega_scale,
        c1: c.c1,
        c2: c.c2,
        positivity_projection: c.options.positivity_projection,
    }
}

/// Fits one voxel of magnitudes `y[0..m]`. `options` may be NULL for the
/// defaults. A degenerate voxel is a successful fit with
/// `RICE_FLAG_DEGENERATE` set.
///
/// # Safety
/// `scheme` must be a live handle, `y` must hold `m` doubles, `options`
/// must be NULL or valid, and `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn rice_fit(
    scheme: *const RiceScheme,
    y: *const f64,
    m: usize,
    options: *const RiceFitOptions,
    out: *mut *mut RiceFit,
) -> RiceStatus {
    guard(|| {
        let s = scheme.as_ref().ok_or(Failure::Null("scheme"))?;
        let y = slice(y, m, "y")?;
        let o = options.as_ref().copied().unwrap_or_else(|| rice_fit_options_default());
        let mut config = FitConfig {
            method: method_of(o.method),
            order: order_of(o.order)?,
            b_cutoff: o.b_cutoff,
            omega_scale: o.omega_scale,
            c1: o.c1,
            c2: o.c2,
            ..FitConfig::default()
        };
        config.options.alpha = o.alpha;
        config.options.max_em_iters = o.max_em_iters as usize;
        config.options.positivity_projection = o.positivity_projection;
        config.validate()?;
        let design = Design::new(&s.inner, config.order);
        let row = try_fit_voxel(&design, &config, 0, y)?;
        put(out, RiceFit { row })
    })
}

/// Number of tensor coefficients (6 or 15), or 0 for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_dim(fit: *const RiceFit) -> usize {
    fit.as_ref().map_or(0, |f| f.row.theta.len())
}

/// Copies the tensor coefficients into `out[0..len]`; `len` must equal
/// `rice_fit_dim(fit)`.
///
/// # Safety
/// `fit` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_theta(fit: *const RiceFit, out: *mut f64, len: usize) -> RiceStatus {
    guard(|| {
        let f = fit.as_ref().ok_or(Failure::Null("fit"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if len != f.row.theta.len() {
            return Err(Failure::Arg(format!("buffer holds {len} values, fit has {}", f.row.theta.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&f.row.theta);
        Ok(())
    })
}

/// Baseline signal power `S0^2`. NaN for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_s0_sq(fit: *const RiceFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.row.s0_sq)
}

/// Noise variance. NaN for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_sigma_sq(fit: *const RiceFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.row.sigma_sq)
}

/// Marginal Rician log-likelihood at the estimate. NaN for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_loglik(fit: *const RiceFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.row.loglik)
}

/// Mean diffusivity. NaN for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_md(fit: *const RiceFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.row.md)
}

/// Fractional anisotropy; NaN for order-4 fits and NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_fa(fit: *const RiceFit) -> f64 {
    fit.as_ref().and_then(|f| f.row.fa).unwrap_or(f64::NAN)
}

/// Iterations (EM sweeps for ML/MAP), or 0 for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_iterations(fit: *const RiceFit) -> u32 {
    fit.as_ref().map_or(0, |f| f.row.iterations as u32)
}

/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_converged(fit: *const RiceFit) -> bool {
    fit.as_ref().is_some_and(|f| f.row.converged)
}

/// Bitwise OR of the `RICE_FLAG_*` constants.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_flags(fit: *const RiceFit) -> u32 {
    fit.as_ref().map_or(0, |f| {
        let r = &f.row;
        (r.degenerate as u32) * RICE_FLAG_DEGENERATE
            | (r.non_converged as u32) * RICE_FLAG_NON_CONVERGED
            | (r.positivity_fail as u32) * RICE_FLAG_POSITIVITY_FAIL
    })
}

/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rice_fit_free(fit: *mut RiceFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

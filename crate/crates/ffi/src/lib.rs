//! C ABI over the `pvi` library.
//!
//! A session owns a configured run: target, kernel and flow state. Every entry
//! point returns a [`PviStatus`]; on failure the message is available from
//! [`pvi_last_error`] on the same thread. Buffers are caller-allocated and
//! sized from [`pvi_session_dims`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pvi::config::{Experiment, RunConfig};
use pvi::estimators::estimate_free_energy;
use pvi::flow::{pvi_init, pvi_step, FlowState, PviConfig};
use pvi::kernels::KernelSpec;
use pvi::numerics::Rng;
use pvi::PviError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PviStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Divergence = 4,
    Io = 5,
    Data = 6,
    BufferSize = 7,
    Panic = 8,
}

/// Opaque handle returned by the session constructors.
pub struct PviSession {
    config: RunConfig,
    flow: PviConfig,
    experiment: Experiment,
    spec: KernelSpec,
    state: FlowState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &PviError) -> PviStatus {
    match e {
        PviError::Config(_) => PviStatus::Config,
        PviError::Divergence { .. } | PviError::Estimator { .. } | PviError::NonFinite(_) => PviStatus::Divergence,
        PviError::Io { .. } => PviStatus::Io,
        PviError::Data(_) => PviStatus::Data,
        _ => PviStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PviStatus, String)>) -> PviStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PviStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PviStatus::Panic
        }
    }
}

fn lib(e: PviError) -> (PviStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PviStatus, String) {
    (PviStatus::NullPointer, format!("{what} is null"))
}

unsafe fn session<'a>(s: *mut PviSession) -> Result<&'a mut PviSession, (PviStatus, String)> {
    s.as_mut().ok_or_else(|| null("session"))
}

unsafe fn out_slice<'a>(buf: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], (PviStatus, String)> {
    if len != need {
        return Err((PviStatus::BufferSize, format!("buffer holds {len} values, {need} required")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if buf.is_null() {
        return Err(null("buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(buf, len))
}

fn build(config: RunConfig) -> Result<PviSession, PviError> {
    let flow = config.flow()?;
    let experiment = config.experiment()?;
    let spec = config.kernel_spec(experiment.target.dim())?;
    let state = pvi_init(&flow, &spec, experiment.target.as_ref())?;
    Ok(PviSession {
        config,
        flow,
        experiment,
        spec,
        state,
    })
}

unsafe fn create(out: *mut *mut PviSession, make: impl FnOnce() -> Result<RunConfig, PviError>) -> PviStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let s = build(make().map_err(lib)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(s));
        Ok(())
    })
}

/// Creates a session from a TOML run configuration file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_from_file(path: *const c_char, out: *mut *mut PviSession) -> PviStatus {
    if path.is_null() {
        return guard(|| Err(null("path")));
    }
    let path = CStr::from_ptr(path).to_string_lossy().into_owned();
    create(out, || RunConfig::load(Path::new(&path)))
}

/// Creates a session from TOML text.
///
/// # Safety
/// `toml` must be a nul-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_from_toml(toml: *const c_char, out: *mut *mut PviSession) -> PviStatus {
    if toml.is_null() {
        return guard(|| Err(null("toml")));
    }
    let text = match CStr::from_ptr(toml).to_str() {
        Ok(t) => t.to_owned(),
        Err(_) => return guard(|| Err((PviStatus::InvalidArgument, "config text is not UTF-8".into()))),
    };
    create(out, || RunConfig::from_toml(&text))
}

/// Releases a session. Null is ignored.
///
/// # Safety
/// `s` must come from a session constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_free(s: *mut PviSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Advances the flow by `n_steps` iterations. On divergence the session keeps
/// its last finite state.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_step(s: *mut PviSession, n_steps: usize) -> PviStatus {
    guard(|| {
        let s = session(s)?;
        for _ in 0..n_steps {
            pvi_step(&mut s.state, &s.spec, s.experiment.target.as_ref(), &s.flow).map_err(lib)?;
        }
        Ok(())
    })
}

/// Advances the flow to the configured iteration count.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_run(s: *mut PviSession) -> PviStatus {
    let remaining = match s.as_ref() {
        Some(r) => r.flow.k.saturating_sub(r.state.iteration),
        None => return guard(|| Err(null("session"))),
    };
    pvi_session_step(s, remaining)
}

/// Writes the iteration count, particle count and dimensions.
///
/// # Safety
/// `s` must be a live session; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_dims(
    s: *const PviSession,
    iteration: *mut usize,
    n_particles: *mut usize,
    d_z: *mut usize,
    d_x: *mut usize,
    n_theta: *mut usize,
) -> PviStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        for (p, v) in [
            (iteration, s.state.iteration),
            (n_particles, s.state.cloud.len()),
            (d_z, s.spec.d_z()),
            (d_x, s.spec.d_x()),
            (n_theta, s.state.theta.len()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the particles, row-major `n_particles × d_z`.
///
/// # Safety
/// `s` must be a live session and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_particles(s: *const PviSession, buf: *mut f64, len: usize) -> PviStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        let z = s.state.cloud.as_matrix().as_slice();
        out_slice(buf, len, z.len())?.copy_from_slice(z);
        Ok(())
    })
}

/// Copies the kernel parameters.
///
/// # Safety
/// `s` must be a live session and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_theta(s: *const PviSession, buf: *mut f64, len: usize) -> PviStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        out_slice(buf, len, s.state.theta.len())?.copy_from_slice(&s.state.theta);
        Ok(())
    })
}

/// Draws `n` points from the current approximation into `buf` (`n × d_x`).
///
/// # Safety
/// `s` must be a live session and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_sample(s: *const PviSession, seed: u64, n: usize, buf: *mut f64, len: usize) -> PviStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        let out = out_slice(buf, len, n * s.spec.d_x())?;
        let sid = s.state.sid(&s.spec).map_err(lib)?;
        out.copy_from_slice(sid.sample(&mut Rng::new(seed), n).as_slice());
        Ok(())
    })
}

/// Log-density of the current approximation at `x` (`d_x` values).
///
/// # Safety
/// `s` must be a live session, `x` valid for `len` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_log_density(s: *const PviSession, x: *const f64, len: usize, out: *mut f64) -> PviStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        if x.is_null() || out.is_null() {
            return Err(null("x or out"));
        }
        let x = std::slice::from_raw_parts(x, len);
        *out = s.state.sid(&s.spec).and_then(|sid| sid.log_density(x)).map_err(lib)?;
        Ok(())
    })
}

/// Monte Carlo free energy of the current approximation with `n` samples.
///
/// # Safety
/// `s` must be a live session and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pvi_session_free_energy(s: *const PviSession, n: usize, seed: u64, out: *mut f64) -> PviStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sid = s.state.sid(&s.spec).map_err(lib)?;
        let fe = estimate_free_energy(&sid, s.experiment.target.as_ref(), n, s.config.pvi.gamma, &mut Rng::new(seed)).map_err(lib)?;
        *out = fe.value;
        Ok(())
    })
}

/// Message of the last failing call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pvi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn pvi_status_name(status: PviStatus) -> *const c_char {
    let s: &'static CStr = match status {
        PviStatus::Ok => c"ok",
        PviStatus::NullPointer => c"null pointer",
        PviStatus::InvalidArgument => c"invalid argument",
        PviStatus::Config => c"configuration error",
        PviStatus::Divergence => c"divergence",
        PviStatus::Io => c"i/o error",
        PviStatus::Data => c"data error",
        PviStatus::BufferSize => c"buffer size mismatch",
        PviStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pvi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

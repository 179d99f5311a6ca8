//! C ABI over the `feddcd` core: direction adjustment on raw arrays,
//! quadratic-problem simulations behind opaque handles, and the lab lemma
//! suite.
//!
//! Every fallible function returns a [`FeddcdStatus`]. On failure the
//! message is available from [`feddcd_last_error`] on the same thread until
//! the next call.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::mem::ManuallyDrop;
use std::panic::{catch_unwind, AssertUnwindSafe};

use feddcd::dual::{adjust_directions, ScalingWeights};
use feddcd::error::Error;
use feddcd::lab::{lemma_suite, QuadInstance, MAX_ENUMERATION_N};
use feddcd::sim::{FedProblem, SimConfig, Simulator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeddcdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    VerificationFailed = 5,
    Panic = 6,
}

/// Opaque federated problem.
pub struct FeddcdProblem {
    inner: FedProblem,
}

/// Opaque running simulation. Owns a copy of its problem.
pub struct FeddcdSimulation {
    // Borrows `problem`; dropped first.
    sim: ManuallyDrop<Simulator<'static>>,
    problem: *mut FedProblem,
}

impl Drop for FeddcdSimulation {
    fn drop(&mut self) {
        // SAFETY: `sim` is the only borrower of `problem` and is dropped before
        // the box is reclaimed; `problem` came from `Box::into_raw`.
        unsafe {
            ManuallyDrop::drop(&mut self.sim);
            drop(Box::from_raw(self.problem));
        }
    }
}

/// Metrics of one simulated round. Optional metrics are NaN when absent.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeddcdRoundMetrics {
    pub round: usize,
    pub dual_gap: f64,
    pub primal_gap: f64,
    pub local_steps: usize,
    pub communications: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> FeddcdStatus {
    match e {
        Error::Config(_) => FeddcdStatus::Config,
        Error::NonFinite(_) | Error::Divergence { .. } | Error::NonConvergence { .. } => FeddcdStatus::Numerical,
        _ => FeddcdStatus::InvalidArgument,
    }
}

fn fail(status: FeddcdStatus, msg: impl Into<String>) -> FeddcdStatus {
    set_error(msg);
    status
}

/// Runs `body` with panics turned into [`FeddcdStatus::Panic`].
fn guard(body: impl FnOnce() -> Result<(), (FeddcdStatus, String)>) -> FeddcdStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FeddcdStatus::Ok,
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(FeddcdStatus::Panic, "internal panic"),
    }
}

fn core_err(e: Error) -> (FeddcdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (FeddcdStatus, String) {
    (FeddcdStatus::NullPointer, format!("{name} is null"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], (FeddcdStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Last error message on this thread, or null. Valid until the next call
/// into this library from the same thread.
#[no_mangle]
pub extern "C" fn feddcd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn feddcd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Adjusted update directions for `n_participants` uploaded models.
///
/// `models` is row-major `n_participants x dim`, `lambdas` holds one scaling
/// weight per participant, `out` receives `n_participants x dim` values.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must not alias the inputs.
#[no_mangle]
pub unsafe extern "C" fn feddcd_adjust_directions(
    n_participants: usize,
    dim: usize,
    models: *const f64,
    lambdas: *const f64,
    out: *mut f64,
) -> FeddcdStatus {
    guard(|| {
        let total = n_participants
            .checked_mul(dim)
            .ok_or((FeddcdStatus::InvalidArgument, "size overflow".to_string()))?;
        let models = slice(models, total, "models")?;
        let lambdas = slice(lambdas, n_participants, "lambdas")?;
        if out.is_null() && total > 0 {
            return Err(null("out"));
        }
        let weights = ScalingWeights::new(lambdas.to_vec()).map_err(core_err)?;
        let uploaded: BTreeMap<usize, Vec<f64>> = (0..n_participants)
            .map(|i| (i, models[i * dim..(i + 1) * dim].to_vec()))
            .collect();
        let dirs = adjust_directions(&uploaded, &weights).map_err(core_err)?;
        let out = std::slice::from_raw_parts_mut(out, total);
        for (i, d) in dirs {
            out[i * dim..(i + 1) * dim].copy_from_slice(&d);
        }
        Ok(())
    })
}

/// Quadratic clients `f_i(w) = (p_i/2)||w||^2 - <q_i, w>`; `q` is row-major `n x dim`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn feddcd_problem_quadratic(
    n: usize,
    dim: usize,
    p: *const f64,
    q: *const f64,
    out: *mut *mut FeddcdProblem,
) -> FeddcdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let total = n
            .checked_mul(dim)
            .ok_or((FeddcdStatus::InvalidArgument, "size overflow".to_string()))?;
        let p = slice(p, n, "p")?;
        let q = slice(q, total, "q")?;
        let rows = (0..n).map(|i| q[i * dim..(i + 1) * dim].to_vec()).collect();
        let inner = FedProblem::quadratic(p.to_vec(), rows).map_err(core_err)?;
        *out = Box::into_raw(Box::new(FeddcdProblem { inner }));
        Ok(())
    })
}

/// # Safety
/// `problem` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn feddcd_problem_free(problem: *mut FeddcdProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of clients and model dimension of a problem.
///
/// # Safety
/// `problem` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn feddcd_problem_shape(
    problem: *const FeddcdProblem,
    n_clients: *mut usize,
    dim: *mut usize,
) -> FeddcdStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if n_clients.is_null() || dim.is_null() {
            return Err(null("output"));
        }
        *n_clients = p.inner.n_clients();
        *dim = p.inner.dim();
        Ok(())
    })
}

/// Starts a simulation. `config_json` holds `SimConfig` keys (null or `{}`
/// for defaults); `n_clients` must match the problem.
///
/// # Safety
/// `problem` must be a live handle, `config_json` null or NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn feddcd_simulation_new(
    problem: *const FeddcdProblem,
    config_json: *const c_char,
    out: *mut *mut FeddcdSimulation,
) -> FeddcdStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_json.is_null() {
            SimConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| (FeddcdStatus::InvalidArgument, "config is not UTF-8".to_string()))?;
            SimConfig::from_json_str(text).map_err(core_err)?
        };
        let owned = Box::into_raw(Box::new(p.inner.clone()));
        // SAFETY: the box outlives `sim`; see `Drop for FeddcdSimulation`.
        let sim = match Simulator::new(&*owned, cfg) {
            Ok(s) => s,
            Err(e) => {
                drop(Box::from_raw(owned));
                return Err(core_err(e));
            }
        };
        *out = Box::into_raw(Box::new(FeddcdSimulation {
            sim: ManuallyDrop::new(sim),
            problem: owned,
        }));
        Ok(())
    })
}

fn metrics(log: &feddcd::sim::RoundLog) -> FeddcdRoundMetrics {
    FeddcdRoundMetrics {
        round: log.round,
        dual_gap: log.dual_gap.unwrap_or(f64::NAN),
        primal_gap: log.primal_gap,
        local_steps: log.local_steps,
        communications: log.communications,
    }
}

/// Metrics of the current state without advancing.
///
/// # Safety
/// `sim` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn feddcd_simulation_metrics(
    sim: *mut FeddcdSimulation,
    out: *mut FeddcdRoundMetrics,
) -> FeddcdStatus {
    guard(|| {
        let s = sim.as_mut().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics(&s.sim.initial_log().map_err(core_err)?);
        Ok(())
    })
}

/// Advances one round and reports its metrics.
///
/// # Safety
/// `sim` must be a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn feddcd_simulation_step(sim: *mut FeddcdSimulation, out: *mut FeddcdRoundMetrics) -> FeddcdStatus {
    guard(|| {
        let s = sim.as_mut().ok_or_else(|| null("sim"))?;
        let log = s.sim.step().map_err(core_err)?;
        if !out.is_null() {
            *out = metrics(&log);
        }
        Ok(())
    })
}

/// Copies the reported primal model into `out` (length `dim`).
///
/// # Safety
/// `sim` must be a live handle; `out` valid for `dim` writes.
#[no_mangle]
pub unsafe extern "C" fn feddcd_simulation_model(sim: *const FeddcdSimulation, out: *mut f64, dim: usize) -> FeddcdStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        let w = s.sim.reported_model();
        if dim != w.len() {
            return Err((
                FeddcdStatus::InvalidArgument,
                format!("model has dimension {}, buffer holds {dim}", w.len()),
            ));
        }
        if out.is_null() && dim > 0 {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(w);
        Ok(())
    })
}

/// # Safety
/// `sim` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn feddcd_simulation_free(sim: *mut FeddcdSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs the lemma suite on `instances` random instances of size `n` at
/// participation `tau` (every `2..=n` when `tau` is 0). Writes the number of
/// failed checks to `failures`; returns `VerificationFailed` when nonzero,
/// with the first failing lemma id in the last error.
///
/// # Safety
/// `failures` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn feddcd_verify_lemmas(
    n: usize,
    tau: usize,
    instances: usize,
    seed: u64,
    failures: *mut usize,
) -> FeddcdStatus {
    guard(|| {
        if !(2..=MAX_ENUMERATION_N).contains(&n) {
            return Err((
                FeddcdStatus::InvalidArgument,
                format!("n = {n} must lie in [2, {MAX_ENUMERATION_N}]"),
            ));
        }
        if tau != 0 && !(2..=n).contains(&tau) {
            return Err((FeddcdStatus::InvalidArgument, format!("tau = {tau} must lie in [2, {n}]")));
        }
        let taus: Vec<usize> = if tau == 0 { (2..=n).collect() } else { vec![tau] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failed = Vec::new();
        for _ in 0..instances {
            let inst = QuadInstance::random(n, 0.5, 10.0, &mut rng).map_err(core_err)?;
            for &t in &taus {
                let checks = lemma_suite(&inst, t, &mut rng).map_err(core_err)?;
                failed.extend(checks.into_iter().filter(|c| !c.pass).map(|c| c.lemma_id));
            }
        }
        if !failures.is_null() {
            *failures = failed.len();
        }
        match failed.first() {
            None => Ok(()),
            Some(id) => Err((FeddcdStatus::VerificationFailed, format!("lemma check failed: {id}"))),
        }
    })
}

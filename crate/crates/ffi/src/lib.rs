//! C interface to the online intensity tracker and network learner.
//!
//! Every entry point returns an [`HwkStatus`]. On failure a description is
//! kept per thread and can be read with [`hwk_last_error_message`].
//! Matrices cross the boundary as row-major `p × p` arrays of `double`.
//! Panics never unwind into C; they are reported as `HWK_STATUS_PANIC`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use hawkes_online::events::{bin_index, Event};
use hawkes_online::kernels::InfluenceKernel;
use hawkes_online::netlearn::{Learner, LearnerConfig};
use hawkes_online::projections::FeasibleSet;
use hawkes_online::tracker::{StepSchedule, Tracker, TrackerConfig};
use hawkes_online::{Error, ErrorClass};
use nalgebra::{DMatrix, DVector};

/// Status codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HwkStatus {
    Ok = 0,
    /// A required pointer argument was null.
    Null = 1,
    /// Invalid parameters: kernel, step sizes, dimensions.
    Config = 2,
    /// Invalid input events.
    Data = 3,
    /// A non-finite loss or rate.
    Numerical = 4,
    /// An internal panic was caught.
    Panic = 5,
}

/// Opaque intensity tracker with a fixed influence matrix.
pub struct HwkTracker {
    inner: Tracker,
}

/// Opaque network learner.
pub struct HwkLearner {
    inner: Learner,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HwkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HwkStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            HwkStatus::Null
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            match e.class() {
                ErrorClass::Config => HwkStatus::Config,
                ErrorClass::Data => HwkStatus::Data,
                ErrorClass::Numerical => HwkStatus::Numerical,
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            HwkStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn kernel_from(spec: *const c_char) -> Result<InfluenceKernel, Fail> {
    if spec.is_null() {
        return Err(Fail::Null("kernel"));
    }
    let s = CStr::from_ptr(spec).to_str().map_err(|_| Error::config("kernel spec is not UTF-8"))?;
    Ok(InfluenceKernel::parse(s, None)?)
}

/// Fixed step `eta`, or `eta / sqrt(t)` when `decay` is nonzero.
fn schedule(eta: f64, decay: bool) -> StepSchedule {
    if decay {
        StepSchedule::SqrtT { eta0: eta }
    } else {
        StepSchedule::Constant { eta0: eta, n_bins: 1 }
    }
}

/// Events of the next bin, checked against its interval `((t-1)δ, tδ]`.
unsafe fn bin_events(
    actors: *const usize,
    times: *const f64,
    n: usize,
    t: usize,
    delta: f64,
) -> Result<Vec<Event>, Fail> {
    let actors = slice(actors, n, "actors")?;
    let times = slice(times, n, "times")?;
    let mut out = Vec::with_capacity(n);
    for (&k, &tau) in actors.iter().zip(times) {
        if !tau.is_finite() || bin_index(tau, delta) != t {
            return Err(Error::data(format!("event time {tau} does not fall in bin {t} of width {delta}")).into());
        }
        out.push(Event::new(k, tau));
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(out)
}

/// Pointer to a NUL-terminated description of the last failure on this
/// thread, or null if the last call succeeded. Valid until the next call
/// on the same thread.
#[no_mangle]
pub extern "C" fn hwk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hwk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Create a tracker for `p` actors.
///
/// `w` is the row-major `p × p` influence matrix, `mu_bar` the baseline
/// rates, `kernel` a spec such as `"exponential alpha=0.9"`. The step size
/// is `eta`, or `eta / sqrt(t)` when `decay_eta` is nonzero.
///
/// # Safety
/// `w` must point to `p*p` doubles, `mu_bar` to `p`, `kernel` to a
/// NUL-terminated string, `out` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hwk_tracker_new(
    p: usize,
    w: *const f64,
    mu_bar: *const f64,
    kernel: *const c_char,
    delta: f64,
    eta: f64,
    decay_eta: i32,
    out: *mut *mut HwkTracker,
) -> HwkStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if p == 0 {
            return Err(Error::config("p must be positive").into());
        }
        let w = DMatrix::from_row_slice(p, p, slice(w, p * p, "w")?);
        let mu = DVector::from_column_slice(slice(mu_bar, p, "mu_bar")?);
        let kernel = kernel_from(kernel)?;
        let cfg = TrackerConfig { schedule: schedule(eta, decay_eta != 0), ..TrackerConfig::new(delta, 1) };
        let inner = Tracker::new(kernel, w, mu, cfg)?;
        *out = Box::into_raw(Box::new(HwkTracker { inner }));
        Ok(())
    })
}

/// Feed the events of the next bin. `times` must lie in that bin.
/// The loss of the forecast made for the bin is written to `loss` when it
/// is not null.
///
/// # Safety
/// `h` must come from [`hwk_tracker_new`]; `actors` and `times` must point
/// to `n` entries each.
#[no_mangle]
pub unsafe extern "C" fn hwk_tracker_observe_bin(
    h: *mut HwkTracker,
    actors: *const usize,
    times: *const f64,
    n: usize,
    loss: *mut f64,
) -> HwkStatus {
    guard(|| {
        let h = h.as_mut().ok_or(Fail::Null("tracker"))?;
        let events = bin_events(actors, times, n, h.inner.t() + 1, h.inner.config().delta)?;
        let l = h.inner.observe_bin(&events)?;
        if !loss.is_null() {
            *loss = l;
        }
        Ok(())
    })
}

/// Copy the forecast rates for the next bin into `out` (`len` must be `p`).
///
/// # Safety
/// `h` must come from [`hwk_tracker_new`]; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hwk_tracker_rate(h: *const HwkTracker, out: *mut f64, len: usize) -> HwkStatus {
    guard(|| {
        let h = h.as_ref().ok_or(Fail::Null("tracker"))?;
        copy_out(h.inner.forecast().as_slice(), out, len)
    })
}

/// # Safety
/// `h` must come from [`hwk_tracker_new`] and not be used afterwards.
/// Null is accepted.
#[no_mangle]
pub unsafe extern "C" fn hwk_tracker_free(h: *mut HwkTracker) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Fail> {
    if len != src.len() {
        return Err(Error::Dimension { expected: src.len(), got: len }.into());
    }
    slice_mut(out, len, "out")?.copy_from_slice(src);
    Ok(())
}

/// Create a network learner for `p` actors starting from `W = 0`.
///
/// `eta` and `rho` are the tracking and learning step sizes, divided by
/// `sqrt(t)` when `decay` is nonzero; `l1_penalty` is the soft threshold
/// weight. Weights are kept in `[0, w_max]` (pass `INFINITY` for no bound).
/// The kernel must have a constant per-bin decay.
///
/// # Safety
/// `mu_bar` must point to `p` doubles, `kernel` to a NUL-terminated
/// string, `out` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hwk_learner_new(
    p: usize,
    mu_bar: *const f64,
    kernel: *const c_char,
    delta: f64,
    eta: f64,
    rho: f64,
    l1_penalty: f64,
    w_max: f64,
    decay: i32,
    out: *mut *mut HwkLearner,
) -> HwkStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if p == 0 {
            return Err(Error::config("p must be positive").into());
        }
        if !(w_max > 0.0) {
            return Err(Error::config(format!("w_max must be positive, got {w_max}")).into());
        }
        let mu = DVector::from_column_slice(slice(mu_bar, p, "mu_bar")?);
        let kernel = kernel_from(kernel)?;
        let decay = decay != 0;
        let cfg = LearnerConfig {
            tracker: TrackerConfig { schedule: schedule(eta, decay), ..TrackerConfig::new(delta, 1) },
            rho: schedule(rho, decay),
            l1_penalty,
            feasible: FeasibleSet::Box(w_max),
            learn_mu: false,
        };
        let inner = Learner::new(kernel, mu, None, cfg)?;
        *out = Box::into_raw(Box::new(HwkLearner { inner }));
        Ok(())
    })
}

/// Feed the events of the next bin; see [`hwk_tracker_observe_bin`].
///
/// # Safety
/// `h` must come from [`hwk_learner_new`]; `actors` and `times` must point
/// to `n` entries each.
#[no_mangle]
pub unsafe extern "C" fn hwk_learner_observe_bin(
    h: *mut HwkLearner,
    actors: *const usize,
    times: *const f64,
    n: usize,
    loss: *mut f64,
) -> HwkStatus {
    guard(|| {
        let h = h.as_mut().ok_or(Fail::Null("learner"))?;
        let delta = h.inner.delta();
        let events = bin_events(actors, times, n, h.inner.t() + 1, delta)?;
        let l = h.inner.observe_bin(&events)?;
        if !loss.is_null() {
            *loss = l;
        }
        Ok(())
    })
}

/// Copy the forecast rates for the next bin into `out` (`len` must be `p`).
///
/// # Safety
/// `h` must come from [`hwk_learner_new`]; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hwk_learner_rate(h: *const HwkLearner, out: *mut f64, len: usize) -> HwkStatus {
    guard(|| {
        let h = h.as_ref().ok_or(Fail::Null("learner"))?;
        copy_out(h.inner.forecast().as_slice(), out, len)
    })
}

/// Copy the current influence estimate, row-major, into `out`
/// (`len` must be `p*p`).
///
/// # Safety
/// `h` must come from [`hwk_learner_new`]; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hwk_learner_weights(h: *const HwkLearner, out: *mut f64, len: usize) -> HwkStatus {
    guard(|| {
        let h = h.as_ref().ok_or(Fail::Null("learner"))?;
        let w = h.inner.weights();
        let row_major: Vec<f64> = w.transpose().as_slice().to_vec();
        copy_out(&row_major, out, len)
    })
}

/// # Safety
/// `h` must come from [`hwk_learner_new`] and not be used afterwards.
/// Null is accepted.
#[no_mangle]
pub unsafe extern "C" fn hwk_learner_free(h: *mut HwkLearner) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn last_error() -> String {
        let p = hwk_last_error_message();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn tracker_matches_library() {
        let kernel = c"exponential alpha=0.5";
        let w = [0.2, 0.0, 0.1, 0.3];
        let mu = [0.4, 0.6];
        let mut h = ptr::null_mut();
        let st = unsafe { hwk_tracker_new(2, w.as_ptr(), mu.as_ptr(), kernel.as_ptr(), 1.0, 0.1, 0, &mut h) };
        assert_eq!(st, HwkStatus::Ok);
        assert!(hwk_last_error_message().is_null());

        let cfg = TrackerConfig { schedule: StepSchedule::Constant { eta0: 0.1, n_bins: 1 }, ..TrackerConfig::new(1.0, 1) };
        let mut reference = Tracker::new(
            InfluenceKernel::exponential(0.5),
            DMatrix::from_row_slice(2, 2, &w),
            DVector::from_column_slice(&mu),
            cfg,
        )
        .unwrap();
        let bins: [&[(usize, f64)]; 3] = [&[(0, 0.5)], &[], &[(1, 2.2), (0, 2.9)]];
        for (i, b) in bins.iter().enumerate() {
            let actors: Vec<usize> = b.iter().map(|e| e.0).collect();
            let times: Vec<f64> = b.iter().map(|e| e.1).collect();
            let mut loss = f64::NAN;
            let st = unsafe { hwk_tracker_observe_bin(h, actors.as_ptr(), times.as_ptr(), b.len(), &mut loss) };
            assert_eq!(st, HwkStatus::Ok, "bin {i}");
            let events: Vec<Event> = b.iter().map(|e| Event::new(e.0, e.1)).collect();
            assert_eq!(loss, reference.observe_bin(&events).unwrap());
            let mut rate = [0.0; 2];
            assert_eq!(unsafe { hwk_tracker_rate(h, rate.as_mut_ptr(), 2) }, HwkStatus::Ok);
            assert_eq!(&rate, reference.forecast().as_slice());
        }
        unsafe { hwk_tracker_free(h) };
    }

    #[test]
    fn error_codes() {
        let mu = [0.1];
        let mut h = ptr::null_mut();
        let st = unsafe { hwk_tracker_new(1, ptr::null(), mu.as_ptr(), c"exponential alpha=0.5".as_ptr(), 1.0, 0.1, 0, &mut h) };
        assert_eq!(st, HwkStatus::Null);
        assert!(last_error().contains("`w`"));

        let w = [0.0];
        let st = unsafe { hwk_tracker_new(1, w.as_ptr(), mu.as_ptr(), c"wiggly".as_ptr(), 1.0, 0.1, 0, &mut h) };
        assert_eq!(st, HwkStatus::Config);
        let st = unsafe { hwk_tracker_new(1, w.as_ptr(), mu.as_ptr(), c"exponential alpha=0.5".as_ptr(), 1.0, 2.0, 0, &mut h) };
        assert_eq!(st, HwkStatus::Config);

        let st = unsafe { hwk_tracker_new(1, w.as_ptr(), mu.as_ptr(), c"exponential alpha=0.5".as_ptr(), 1.0, 0.1, 0, &mut h) };
        assert_eq!(st, HwkStatus::Ok);
        // an event outside the first bin
        let st = unsafe { hwk_tracker_observe_bin(h, [0usize].as_ptr(), [1.5].as_ptr(), 1, ptr::null_mut()) };
        assert_eq!(st, HwkStatus::Data);
        assert!(last_error().contains("bin 1"));
        let st = unsafe { hwk_tracker_observe_bin(h, [3usize].as_ptr(), [0.5].as_ptr(), 1, ptr::null_mut()) };
        assert_eq!(st, HwkStatus::Data);
        let mut rate = [0.0; 2];
        assert_eq!(unsafe { hwk_tracker_rate(h, rate.as_mut_ptr(), 2) }, HwkStatus::Data);
        assert_eq!(unsafe { hwk_tracker_rate(ptr::null(), rate.as_mut_ptr(), 1) }, HwkStatus::Null);
        unsafe { hwk_tracker_free(h) };
        unsafe { hwk_tracker_free(ptr::null_mut()) };
    }

    #[test]
    fn panics_are_caught() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, HwkStatus::Panic);
        assert!(last_error().contains("boom"));
    }

    #[test]
    fn learner_runs_and_reports_weights() {
        let mu = [0.2, 0.2];
        let mut h = ptr::null_mut();
        let st = unsafe {
            hwk_learner_new(2, mu.as_ptr(), c"exponential alpha=0.5".as_ptr(), 1.0, 0.1, 0.05, 0.0, f64::INFINITY, 0, &mut h)
        };
        assert_eq!(st, HwkStatus::Ok, "{}", if st == HwkStatus::Ok { String::new() } else { last_error() });
        // actor 0 fires every bin and actor 1 follows it, so W[1][0] should grow
        for t in 1..=200usize {
            let times = [t as f64 - 0.9, t as f64 - 0.1];
            let st = unsafe { hwk_learner_observe_bin(h, [0usize, 1].as_ptr(), times.as_ptr(), 2, ptr::null_mut()) };
            assert_eq!(st, HwkStatus::Ok);
        }
        let mut w = [0.0; 4];
        assert_eq!(unsafe { hwk_learner_weights(h, w.as_mut_ptr(), 4) }, HwkStatus::Ok);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!(w[2] > 0.0, "{w:?}");
        let mut rate = [0.0; 2];
        assert_eq!(unsafe { hwk_learner_rate(h, rate.as_mut_ptr(), 2) }, HwkStatus::Ok);
        assert!(rate.iter().all(|r| r.is_finite() && *r > 0.0));
        unsafe { hwk_learner_free(h) };
    }

    #[test]
    fn version_is_set() {
        let v = unsafe { CStr::from_ptr(hwk_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

//! C ABI over the iontrack toolkit.
//!
//! Every fallible call returns an [`IontrackStatus`]; on failure a message
//! is kept per thread and can be read with [`iontrack_last_error_message`].
//! Objects are opaque handles returned through out-pointers and released by
//! the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use iontrack::chain::chain_census;
use iontrack::odmr::{fit, FitResult, Model, Trace};
use iontrack::radialdose::{ion_state_at, DoseKernel};
use iontrack::stopping::{parse_stopping_table, StoppingTable};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IontrackStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Parse = 3,
    OutOfRange = 4,
    FitFailed = 5,
    NotFound = 6,
    Panic = 99,
}

/// Stopping-power table with the default radial dose kernel.
pub struct IontrackStopping {
    table: StoppingTable,
    kernel: DoseKernel,
}

/// Result of an ODMR fit.
pub struct IontrackFit {
    result: FitResult,
    names: Vec<CString>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IontrackCensus {
    /// Expected visible chains in the field.
    pub expected: f64,
    /// Visible chains per cm².
    pub areal_density_cm2: f64,
    /// Central 95% Poisson interval.
    pub interval_low: f64,
    pub interval_high: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type Failure = (IontrackStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IontrackStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IontrackStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IontrackStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (IontrackStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (IontrackStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next iontrack call on the same thread.
#[no_mangle]
pub extern "C" fn iontrack_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Copies the last error message into `buf` (NUL-terminated). Returns the
/// message length without the terminator, or -1 when `buf` is too small.
/// A null `buf` just reports the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn iontrack_copy_last_error(buf: *mut c_char, len: usize) -> c_int {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&b""[..], |s| s.as_bytes());
        if buf.is_null() {
            return bytes.len() as c_int;
        }
        if bytes.len() + 1 > len {
            return -1;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
        *buf.add(bytes.len()) = 0;
        bytes.len() as c_int
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn iontrack_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Runs a command-line invocation (arguments without the program name) and
/// returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn iontrack_run(argc: c_int, argv: *const *const c_char) -> c_int {
    let mut args = Vec::new();
    let status = guard(|| {
        if argc < 0 || (argc > 0 && argv.is_null()) {
            return Err(null("argv"));
        }
        for i in 0..argc as usize {
            args.push(text(*argv.add(i), "argv[i]")?.to_string());
        }
        Ok(())
    });
    if status != IontrackStatus::Ok {
        return 2;
    }
    catch_unwind(|| iontrack::cli::dispatch(args)).unwrap_or(1)
}

/// Built-in stopping table: "U" or "Au".
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iontrack_stopping_builtin(name: *const c_char, out_handle: *mut *mut IontrackStopping) -> IontrackStatus {
    guard(|| {
        let name = text(name, "name")?;
        let slot = out(out_handle, "out")?;
        let table = StoppingTable::by_name(name).ok_or_else(|| (IontrackStatus::NotFound, format!("no built-in table `{name}`")))?;
        *slot = Box::into_raw(Box::new(IontrackStopping { table, kernel: DoseKernel::default() }));
        Ok(())
    })
}

/// Stopping table parsed from its text form.
///
/// # Safety
/// `text_ptr` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iontrack_stopping_parse(text_ptr: *const c_char, out_handle: *mut *mut IontrackStopping) -> IontrackStatus {
    guard(|| {
        let t = text(text_ptr, "text")?;
        let slot = out(out_handle, "out")?;
        let table = parse_stopping_table(t).map_err(|e| (IontrackStatus::Parse, e.to_string()))?;
        *slot = Box::into_raw(Box::new(IontrackStopping { table, kernel: DoseKernel::default() }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iontrack_stopping_free(h: *mut IontrackStopping) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Projected range in µm.
///
/// # Safety
/// `h` must be a live handle and `range_um` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iontrack_stopping_range(h: *const IontrackStopping, range_um: *mut f64) -> IontrackStatus {
    guard(|| {
        *out(range_um, "range_um")? = handle(h, "handle")?.table.range();
        Ok(())
    })
}

/// Electronic and nuclear stopping (keV/nm) at depth `z_um`.
///
/// # Safety
/// `h` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn iontrack_stopping_at(
    h: *const IontrackStopping,
    z_um: f64,
    electronic: *mut f64,
    nuclear: *mut f64,
) -> IontrackStatus {
    guard(|| {
        let s = handle(h, "handle")?;
        let (e_out, n_out) = (out(electronic, "electronic")?, out(nuclear, "nuclear")?);
        if !(0.0..=s.table.range()).contains(&z_um) {
            return Err((IontrackStatus::OutOfRange, format!("depth {z_um} µm outside [0, {}]", s.table.range())));
        }
        let (se, sn) = s.table.stopping_at_depth(z_um);
        *e_out = se;
        *n_out = sn;
        Ok(())
    })
}

/// Radial dose (eV/nm³) at radius `r_nm` from the path, at depth `z_um`.
///
/// # Safety
/// `h` must be a live handle and `dose` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iontrack_radial_dose(h: *const IontrackStopping, z_um: f64, r_nm: f64, dose: *mut f64) -> IontrackStatus {
    guard(|| {
        let s = handle(h, "handle")?;
        let slot = out(dose, "dose")?;
        let state = ion_state_at(&s.table, z_um, &s.kernel).map_err(|e| (IontrackStatus::OutOfRange, e.to_string()))?;
        *slot = s.kernel.radial_dose(&state, r_nm).map_err(|e| (IontrackStatus::OutOfRange, e.to_string()))?;
        Ok(())
    })
}

/// Fits an ODMR trace. `model` is one of "esr", "rabi", "t1", "hahn";
/// `peaks` is used by "esr" only.
///
/// # Safety
/// `x` and `y` must point to `n` doubles; `model` must be NUL-terminated;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn iontrack_odmr_fit(
    model: *const c_char,
    peaks: usize,
    x: *const f64,
    y: *const f64,
    n: usize,
    out_handle: *mut *mut IontrackFit,
) -> IontrackStatus {
    guard(|| {
        let mut m: Model = text(model, "model")?.parse().map_err(|e: iontrack::odmr::FitError| (IontrackStatus::InvalidArgument, e.to_string()))?;
        if let Model::Esr { .. } = m {
            m = Model::Esr { peaks };
        }
        let slot = out(out_handle, "out")?;
        if n > 0 && (x.is_null() || y.is_null()) {
            return Err(null("x/y"));
        }
        let (xs, ys) = if n == 0 {
            (Vec::new(), Vec::new())
        } else {
            (std::slice::from_raw_parts(x, n).to_vec(), std::slice::from_raw_parts(y, n).to_vec())
        };
        let trace = Trace::new(xs, ys).map_err(|e| (IontrackStatus::InvalidArgument, e.to_string()))?;
        let result = fit(m, &trace).map_err(|e| (IontrackStatus::FitFailed, e.to_string()))?;
        let names = result.names.iter().map(|n| CString::new(n.as_str()).expect("parameter names have no NUL")).collect();
        *slot = Box::into_raw(Box::new(IontrackFit { result, names }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iontrack_fit_free(h: *mut IontrackFit) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of fitted parameters, 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iontrack_fit_param_count(h: *const IontrackFit) -> usize {
    h.as_ref().map_or(0, |f| f.result.params.len())
}

/// Name of parameter `i`, valid while the handle lives; null if out of range.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iontrack_fit_param_name(h: *const IontrackFit, i: usize) -> *const c_char {
    h.as_ref().and_then(|f| f.names.get(i)).map_or(ptr::null(), |s| s.as_ptr())
}

/// Value and 1σ uncertainty of the named parameter. `sigma` may be null.
///
/// # Safety
/// `h` must be a live handle, `name` NUL-terminated, `value` valid.
#[no_mangle]
pub unsafe extern "C" fn iontrack_fit_param(h: *const IontrackFit, name: *const c_char, value: *mut f64, sigma: *mut f64) -> IontrackStatus {
    guard(|| {
        let f = handle(h, "handle")?;
        let name = text(name, "name")?;
        let slot = out(value, "value")?;
        *slot = f.result.get(name).ok_or_else(|| (IontrackStatus::NotFound, format!("no parameter `{name}`")))?;
        if let Some(s) = sigma.as_mut() {
            *s = f.result.uncertainty(name).unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// True when the optimizer converged and no reliability flag was raised.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iontrack_fit_reliable(h: *const IontrackFit) -> bool {
    h.as_ref().is_some_and(|f| f.result.reliable())
}

/// Fit as a JSON document. Release with [`iontrack_string_free`].
///
/// # Safety
/// `h` must be a live handle and `json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iontrack_fit_to_json(h: *const IontrackFit, json: *mut *mut c_char) -> IontrackStatus {
    guard(|| {
        let f = handle(h, "handle")?;
        let slot = out(json, "json")?;
        let s = serde_json::to_string(&f.result).map_err(|e| (IontrackStatus::InvalidArgument, e.to_string()))?;
        *slot = CString::new(s).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iontrack_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Expected visible NV chains for a fluence (cm⁻²), field area (µm²) and
/// detection efficiency in [0, 1].
///
/// # Safety
/// `census` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iontrack_chain_census(fluence_cm2: f64, area_um2: f64, detection: f64, census: *mut IontrackCensus) -> IontrackStatus {
    guard(|| {
        let slot = out(census, "census")?;
        let c = chain_census(fluence_cm2, area_um2, detection).map_err(|e| (IontrackStatus::InvalidArgument, e.to_string()))?;
        *slot = IontrackCensus {
            expected: c.expected,
            areal_density_cm2: c.areal_density_cm2,
            interval_low: c.interval_low,
            interval_high: c.interval_high,
        };
        Ok(())
    })
}

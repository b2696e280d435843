use std::ffi::{CStr, CString};
use std::ptr;

use iontrack_ffi::*;

fn last_error() -> String {
    let p = iontrack_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn stopping_handle_round_trip() {
    let mut h = ptr::null_mut();
    let name = CString::new("U").unwrap();
    assert_eq!(unsafe { iontrack_stopping_builtin(name.as_ptr(), &mut h) }, IontrackStatus::Ok);
    assert!(iontrack_last_error_message().is_null());
    let mut range = 0.0;
    assert_eq!(unsafe { iontrack_stopping_range(h, &mut range) }, IontrackStatus::Ok);
    assert!((27.0..33.0).contains(&range), "{range}");
    let (mut se, mut sn) = (0.0, 0.0);
    assert_eq!(unsafe { iontrack_stopping_at(h, 0.0, &mut se, &mut sn) }, IontrackStatus::Ok);
    assert!((44.0..54.0).contains(&se), "{se}");
    assert_eq!(unsafe { iontrack_stopping_at(h, 1e3, &mut se, &mut sn) }, IontrackStatus::OutOfRange);
    assert!(last_error().contains("outside"));
    let (mut near, mut far) = (0.0, 0.0);
    assert_eq!(unsafe { iontrack_radial_dose(h, 5.0, 1.0, &mut near) }, IontrackStatus::Ok);
    assert_eq!(unsafe { iontrack_radial_dose(h, 5.0, 10.0, &mut far) }, IontrackStatus::Ok);
    assert!(near > far && far > 0.0);
    unsafe { iontrack_stopping_free(h) };
    unsafe { iontrack_stopping_free(ptr::null_mut()) };
}

#[test]
fn unknown_table_and_null_arguments() {
    let mut h = ptr::null_mut();
    let name = CString::new("Xe").unwrap();
    assert_eq!(unsafe { iontrack_stopping_builtin(name.as_ptr(), &mut h) }, IontrackStatus::NotFound);
    assert!(h.is_null());
    let len = unsafe { iontrack_copy_last_error(ptr::null_mut(), 0) };
    assert_eq!(len as usize, last_error().len());
    let mut small = [0 as std::ffi::c_char; 4];
    assert_eq!(unsafe { iontrack_copy_last_error(small.as_mut_ptr(), small.len()) }, -1);
    let mut buf = vec![0 as std::ffi::c_char; len as usize + 1];
    assert_eq!(unsafe { iontrack_copy_last_error(buf.as_mut_ptr(), buf.len()) }, len);
    assert_eq!(unsafe { iontrack_stopping_builtin(ptr::null(), &mut h) }, IontrackStatus::NullArgument);
    let mut range = 0.0;
    assert_eq!(unsafe { iontrack_stopping_range(ptr::null(), &mut range) }, IontrackStatus::NullArgument);
}

#[test]
fn parse_error_is_reported() {
    let mut h = ptr::null_mut();
    let bad = CString::new("not a table").unwrap();
    assert_eq!(unsafe { iontrack_stopping_parse(bad.as_ptr(), &mut h) }, IontrackStatus::Parse);
    assert!(!last_error().is_empty());
}

#[test]
fn odmr_fit_through_handles() {
    let x: Vec<f64> = (0..400).map(|i| i as f64 * 0.05).collect();
    let y: Vec<f64> = x.iter().map(|t| 0.3 * (-t / 5.8).exp() + 0.7).collect();
    let model = CString::new("t1").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { iontrack_odmr_fit(model.as_ptr(), 0, x.as_ptr(), y.as_ptr(), x.len(), &mut h) }, IontrackStatus::Ok);
    assert_eq!(unsafe { iontrack_fit_param_count(h) }, 3);
    let name = unsafe { CStr::from_ptr(iontrack_fit_param_name(h, 1)) };
    assert_eq!(name.to_str().unwrap(), "t1");
    assert!(unsafe { iontrack_fit_param_name(h, 3) }.is_null());
    let (mut v, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { iontrack_fit_param(h, name.as_ptr(), &mut v, &mut s) }, IontrackStatus::Ok);
    assert!((v / 5.8 - 1.0).abs() < 1e-8);
    assert!(unsafe { iontrack_fit_reliable(h) });
    let missing = CString::new("t2").unwrap();
    assert_eq!(unsafe { iontrack_fit_param(h, missing.as_ptr(), &mut v, ptr::null_mut()) }, IontrackStatus::NotFound);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { iontrack_fit_to_json(h, &mut json) }, IontrackStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"t1\""));
    unsafe {
        iontrack_string_free(json);
        iontrack_fit_free(h);
    }
}

#[test]
fn odmr_rejects_bad_input() {
    let model = CString::new("ramsey").unwrap();
    let mut h = ptr::null_mut();
    let x = [0.0, 1.0];
    assert_eq!(unsafe { iontrack_odmr_fit(model.as_ptr(), 1, x.as_ptr(), x.as_ptr(), 2, &mut h) }, IontrackStatus::InvalidArgument);
    let model = CString::new("t1").unwrap();
    let y = [1.0, 0.0];
    let xr = [1.0, 0.0];
    assert_eq!(unsafe { iontrack_odmr_fit(model.as_ptr(), 1, xr.as_ptr(), y.as_ptr(), 2, &mut h) }, IontrackStatus::InvalidArgument);
    assert_eq!(unsafe { iontrack_odmr_fit(model.as_ptr(), 1, ptr::null(), y.as_ptr(), 2, &mut h) }, IontrackStatus::NullArgument);
}

#[test]
fn census_matches_cube_of_inputs() {
    let mut c = IontrackCensus::default();
    assert_eq!(unsafe { iontrack_chain_census(1e8, 16.0, 1.0, &mut c) }, IontrackStatus::Ok);
    assert!((c.expected - 16.0).abs() < 1e-12);
    assert!(c.interval_low < 16.0 && c.interval_high > 16.0);
    assert_eq!(unsafe { iontrack_chain_census(1e8, 16.0, 1.5, &mut c) }, IontrackStatus::InvalidArgument);
}

#[test]
fn run_reports_exit_codes() {
    let args = [CString::new("frobnicate").unwrap()];
    let ptrs: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { iontrack_run(ptrs.len() as _, ptrs.as_ptr()) }, 2);
    let args = ["chain", "census", "--fluence", "1e8", "--area", "16"].map(|s| CString::new(s).unwrap());
    let ptrs: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { iontrack_run(ptrs.len() as _, ptrs.as_ptr()) }, 0);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(iontrack_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/iontrack.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["iontrack_last_error_message", "iontrack_odmr_fit", "iontrack_stopping_free", "IONTRACK_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).status() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}

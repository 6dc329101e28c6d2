use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use betel_ffi::*;

fn simulate(json: &str) -> *mut BetelDataset {
    let j = CString::new(json).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { betel_dataset_simulate(j.as_ptr(), &mut ds) }, BetelStatus::Ok);
    ds
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(betel_last_error_message()) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { betel_string_free(p) };
    s
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(betel_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn simulate_and_free() {
    let ds = simulate(r#"{"n": 123, "rho": 0.2, "seed": 4}"#);
    assert_eq!(unsafe { betel_dataset_n(ds) }, 123);
    unsafe { betel_dataset_free(ds) };
    unsafe { betel_dataset_free(ptr::null_mut()) };
    assert_eq!(unsafe { betel_dataset_n(ptr::null()) }, 0);
}

#[test]
fn bad_inputs_report_status_and_message() {
    let mut ds = ptr::null_mut();
    let bad = CString::new(r#"{"n": 100, "rho": 1.5}"#).unwrap();
    assert_eq!(unsafe { betel_dataset_simulate(bad.as_ptr(), &mut ds) }, BetelStatus::Config);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());

    let junk = CString::new("{").unwrap();
    assert_eq!(unsafe { betel_dataset_simulate(junk.as_ptr(), &mut ds) }, BetelStatus::Config);
    assert_eq!(unsafe { betel_dataset_simulate(ptr::null(), &mut ds) }, BetelStatus::NullPointer);

    let mut bf = 0.0;
    let mut v = BetelVerdict::Exogenous;
    assert_eq!(
        unsafe { betel_test_endogeneity(ptr::null(), ptr::null(), &mut bf, &mut v) },
        BetelStatus::NullPointer
    );

    let path = CString::new("/nonexistent/data.csv").unwrap();
    let schema = CString::new(r#"{"y": "y", "x": ["x"], "z1": ["c"], "z2": ["z"]}"#).unwrap();
    assert_eq!(
        unsafe { betel_dataset_load_csv(path.as_ptr(), schema.as_ptr(), &mut ds) },
        BetelStatus::Config
    );
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.csv");
    std::fs::write(&file, "y,x,c,z\n1,2,1,0.5\n2,1,1,0.1\n0.5,3,1,0.9\n1.5,2.5,1,0.3\n").unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let schema = CString::new(r#"{"y": "y", "x": ["x"], "z1": ["c"], "z2": ["z"]}"#).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { betel_dataset_load_csv(path.as_ptr(), schema.as_ptr(), &mut ds) },
        BetelStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(unsafe { betel_dataset_n(ds) }, 4);
    unsafe { betel_dataset_free(ds) };
}

#[test]
fn arrays_build_a_dataset() {
    let n = 5;
    let y = [1.0, 2.0, 3.0, 4.0, 5.5];
    let x = [0.5, 1.0, 2.0, 2.5, 3.5];
    let z1 = [1.0; 5];
    let z2 = [0.1, 0.9, 0.3, 0.4, 0.8];
    let mut ds = ptr::null_mut();
    let s = unsafe { betel_dataset_from_arrays(n, y.as_ptr(), x.as_ptr(), 1, z1.as_ptr(), 1, z2.as_ptr(), 1, &mut ds) };
    assert_eq!(s, BetelStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { betel_dataset_n(ds) }, 5);
    unsafe { betel_dataset_free(ds) };
}

#[test]
fn endogeneity_test_over_the_abi() {
    let ds = simulate(r#"{"n": 1000, "rho": 0.5, "seed": 7}"#);
    let opts = CString::new(r#"{"fit": {"mh": {"n_draws": 2000, "n_burn": 500, "seed": 3}}}"#).unwrap();
    let mut bf = f64::NAN;
    let mut v = BetelVerdict::Exogenous;
    let s = unsafe { betel_test_endogeneity(ds, opts.as_ptr(), &mut bf, &mut v) };
    assert_eq!(s, BetelStatus::Ok, "{}", last_error());
    assert!(bf.is_finite());
    assert_eq!(v, BetelVerdict::Endogenous);

    let bad = CString::new(r#"{"prior": {"kind": "training", "train_fraction": 2.0}}"#).unwrap();
    let s = unsafe { betel_test_endogeneity(ds, bad.as_ptr(), &mut bf, &mut v) };
    assert_ne!(s, BetelStatus::Ok);
    unsafe { betel_dataset_free(ds) };
}

#[test]
fn gmm_msc_json() {
    let ds = simulate(r#"{"n": 400, "seed": 2, "design": {"kind": "two_treatments"}}"#);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { betel_gmm_msc(ds, &mut out) }, BetelStatus::Ok, "{}", last_error());
    let report: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 4);
    assert_eq!(report["n"].as_u64(), Some(400));
    unsafe { betel_dataset_free(ds) };
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/betel.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "betel_version",
        "betel_last_error_message",
        "betel_dataset_load_csv",
        "betel_dataset_simulate",
        "betel_dataset_from_arrays",
        "betel_dataset_free",
        "betel_test_endogeneity",
        "betel_select_models",
        "betel_gmm_msc",
        "betel_string_free",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, format!("#include \"{}\"\nint main(void) {{ return 0; }}\n", header.display())).unwrap();
    if let Ok(out) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

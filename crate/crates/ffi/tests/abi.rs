use std::ffi::{CStr, CString};
use std::ptr;

use jumpest_ffi::*;

fn last_error() -> String {
    let p = je_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn builtin(name: &str) -> *mut JeModel {
    let name = CString::new(name).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { je_model_new_builtin(name.as_ptr(), &mut m) }, JeStatus::Ok);
    m
}

#[test]
fn simulate_then_estimate() {
    let m = builtin("quadratic_ef_model");
    assert_eq!(unsafe { je_model_dim(m) }, 2);
    let theta = [1.0, 0.5];
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { je_simulate(m, theta.as_ptr(), 2, 5000, 0.02, 3, &mut p) }, JeStatus::Ok);
    assert_eq!(unsafe { je_path_len(p) }, 5001);
    assert!((unsafe { je_path_delta(p) } - 0.02).abs() < 1e-15);

    let ef = CString::new("quadratic").unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { je_estimate(m, p, ef.as_ptr(), &mut e) }, JeStatus::Ok);
    assert_eq!(unsafe { je_estimate_dim(e) }, 2);
    assert_eq!(unsafe { je_estimate_converged(e) }, 1);
    let mut hat = [0.0; 2];
    let mut se = [0.0; 2];
    assert_eq!(unsafe { je_estimate_theta(e, hat.as_mut_ptr(), 2) }, JeStatus::Ok);
    assert_eq!(unsafe { je_estimate_std_errors(e, se.as_mut_ptr(), 2) }, JeStatus::Ok);
    for j in 0..2 {
        assert!(se[j] > 0.0);
        assert!((hat[j] - theta[j]).abs() < 5.0 * se[j], "{hat:?} {se:?}");
    }
    unsafe {
        je_estimate_free(e);
        je_path_free(p);
        je_model_free(m);
    }
}

#[test]
fn path_round_trip_and_small_buffer() {
    let v = [0.1, -0.2, 0.3];
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { je_path_from_values(v.as_ptr(), 3, 0.1, &mut p) }, JeStatus::Ok);
    let mut buf = [0.0; 3];
    assert_eq!(unsafe { je_path_values(p, buf.as_mut_ptr(), 2) }, JeStatus::BufferTooSmall);
    assert!(last_error().contains("3 needed"));
    assert_eq!(unsafe { je_path_values(p, buf.as_mut_ptr(), 3) }, JeStatus::Ok);
    assert_eq!(buf, v);
    unsafe { je_path_free(p) };
}

#[test]
fn errors_are_reported() {
    let bad = CString::new("no_such_model").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { je_model_new_builtin(bad.as_ptr(), &mut m) }, JeStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("no_such_model"));

    assert_eq!(unsafe { je_model_new_builtin(ptr::null(), &mut m) }, JeStatus::NullPointer);

    let json = CString::new(r#"{"model": {"name": "ou_additive_jumps"}, "bogus": 1}"#).unwrap();
    assert_eq!(unsafe { je_model_from_json(json.as_ptr(), &mut m) }, JeStatus::Config);

    let m = builtin("ou_additive_jumps");
    let mut p = ptr::null_mut();
    let theta = [1.0, 0.0];
    assert_eq!(unsafe { je_simulate(m, theta.as_ptr(), 2, 10, 0.1, 1, &mut p) }, JeStatus::InvalidArgument);
    assert!(p.is_null());
    unsafe { je_model_free(m) };

    // Null handles are tolerated by the infallible accessors and destructors.
    unsafe {
        assert_eq!(je_path_len(ptr::null()), 0);
        je_model_free(ptr::null_mut());
        je_path_free(ptr::null_mut());
        je_estimate_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/jumpest.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("smoke");
    // Integration tests run from <target>/<profile>/deps; the static library sits one level up.
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libjumpest_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let status = std::process::Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cc is required for this test");
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fields: Vec<f64> = String::from_utf8(out.stdout).unwrap().split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[4], 1.0);
}

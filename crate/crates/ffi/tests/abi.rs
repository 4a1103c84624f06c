use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use pvi_ffi::*;

const TOY: &str = r#"
name = "toy"
seed = 3

[target]
kind = "multimodal"

[kernel]
kind = "skip"
hidden = 16

[pvi]
k = 6
m = 8
l = 4
"#;

fn open(text: &str) -> (PviStatus, *mut PviSession) {
    let c = CString::new(text).unwrap();
    let mut s = ptr::null_mut();
    let status = unsafe { pvi_session_from_toml(c.as_ptr(), &mut s) };
    (status, s)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(pvi_last_error()) }.to_string_lossy().into_owned()
}

struct Dims {
    iteration: usize,
    m: usize,
    d_z: usize,
    d_x: usize,
    n_theta: usize,
}

fn dims(s: *const PviSession) -> Dims {
    let mut d = Dims {
        iteration: 0,
        m: 0,
        d_z: 0,
        d_x: 0,
        n_theta: 0,
    };
    let st = unsafe { pvi_session_dims(s, &mut d.iteration, &mut d.m, &mut d.d_z, &mut d.d_x, &mut d.n_theta) };
    assert_eq!(st, PviStatus::Ok);
    d
}

#[test]
fn session_lifecycle() {
    let (st, s) = open(TOY);
    assert_eq!(st, PviStatus::Ok, "{}", last_error());
    let d = dims(s);
    assert_eq!((d.iteration, d.m, d.d_z, d.d_x), (0, 8, 2, 2));
    assert!(d.n_theta > 0);

    assert_eq!(unsafe { pvi_session_step(s, 2) }, PviStatus::Ok);
    assert_eq!(dims(s).iteration, 2);
    assert_eq!(unsafe { pvi_session_run(s) }, PviStatus::Ok);
    assert_eq!(dims(s).iteration, 6);

    let mut z = vec![f64::NAN; d.m * d.d_z];
    assert_eq!(unsafe { pvi_session_particles(s, z.as_mut_ptr(), z.len()) }, PviStatus::Ok);
    assert!(z.iter().all(|v| v.is_finite()));

    let mut theta = vec![f64::NAN; d.n_theta];
    assert_eq!(unsafe { pvi_session_theta(s, theta.as_mut_ptr(), theta.len()) }, PviStatus::Ok);
    assert!(theta.iter().all(|v| v.is_finite()));

    let mut a = vec![0.0; 5 * d.d_x];
    let mut b = vec![0.0; 5 * d.d_x];
    unsafe {
        assert_eq!(pvi_session_sample(s, 9, 5, a.as_mut_ptr(), a.len()), PviStatus::Ok);
        assert_eq!(pvi_session_sample(s, 9, 5, b.as_mut_ptr(), b.len()), PviStatus::Ok);
    }
    assert_eq!(a, b);

    let mut lp = f64::NAN;
    assert_eq!(unsafe { pvi_session_log_density(s, a.as_ptr(), d.d_x, &mut lp) }, PviStatus::Ok);
    assert!(lp.is_finite());

    let mut fe = f64::NAN;
    assert_eq!(unsafe { pvi_session_free_energy(s, 64, 1, &mut fe) }, PviStatus::Ok);
    assert!(fe.is_finite());
    unsafe { pvi_session_free(s) };
}

#[test]
fn buffer_size_is_checked() {
    let (_, s) = open(TOY);
    let mut z = vec![0.0; 3];
    assert_eq!(unsafe { pvi_session_particles(s, z.as_mut_ptr(), z.len()) }, PviStatus::BufferSize);
    assert!(last_error().contains("required"));
    unsafe { pvi_session_free(s) };
}

#[test]
fn null_and_bad_input() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pvi_session_from_toml(ptr::null(), &mut out) }, PviStatus::NullPointer);
    assert_eq!(unsafe { pvi_session_step(ptr::null_mut(), 1) }, PviStatus::NullPointer);
    assert_eq!(
        unsafe {
            pvi_session_dims(
                ptr::null(),
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut(),
            )
        },
        PviStatus::NullPointer
    );
    unsafe { pvi_session_free(ptr::null_mut()) };

    let (st, s) = open("name = \"x\"\nbogus = 1\n");
    assert_eq!(st, PviStatus::Config);
    assert!(s.is_null());
    assert!(!last_error().is_empty());

    let missing = CString::new("/nonexistent/run.toml").unwrap();
    assert_ne!(unsafe { pvi_session_from_file(missing.as_ptr(), &mut out) }, PviStatus::Ok);
    assert!(out.is_null());
}

#[test]
fn success_clears_error() {
    let (st, _) = open("garbage =");
    assert_ne!(st, PviStatus::Ok);
    assert!(!last_error().is_empty());
    let (st, s) = open(TOY);
    assert_eq!(st, PviStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { pvi_session_free(s) };
}

#[test]
fn status_names_and_version() {
    let name = unsafe { CStr::from_ptr(pvi_status_name(PviStatus::BufferSize)) };
    assert_eq!(name.to_str().unwrap(), "buffer size mismatch");
    let v = unsafe { CStr::from_ptr(pvi_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> String {
    std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/pvi.h")).unwrap()
}

#[test]
fn header_declares_the_abi() {
    let h = header();
    for name in [
        "pvi_session_from_file",
        "pvi_session_from_toml",
        "pvi_session_free",
        "pvi_session_step",
        "pvi_session_run",
        "pvi_session_dims",
        "pvi_session_particles",
        "pvi_session_theta",
        "pvi_session_sample",
        "pvi_session_log_density",
        "pvi_session_free_energy",
        "pvi_last_error",
        "pvi_status_name",
        "pvi_version",
        "typedef struct PviSession PviSession",
        "PVI_STATUS_BUFFER_SIZE = 7",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

const SMOKE_C: &str = r#"
#include <stdio.h>
#include "pvi.h"

static const char *CFG =
    "name = \"c\"\nseed = 1\n[target]\nkind = \"banana\"\n"
    "[kernel]\nkind = \"skip\"\nhidden = 8\n[pvi]\nk = 3\nm = 4\nl = 2\n";

int main(void) {
    PviSession *s = NULL;
    if (pvi_session_from_toml(CFG, &s) != PVI_STATUS_OK) {
        fprintf(stderr, "%s\n", pvi_last_error());
        return 1;
    }
    if (pvi_session_run(s) != PVI_STATUS_OK) return 2;
    size_t it = 0, m = 0, dz = 0;
    pvi_session_dims(s, &it, &m, &dz, NULL, NULL);
    double z[8];
    if (pvi_session_particles(s, z, m * dz) != PVI_STATUS_OK) return 3;
    if (pvi_session_particles(s, z, 1) != PVI_STATUS_BUFFER_SIZE) return 4;
    pvi_session_free(s);
    printf("iter=%zu m=%zu\n", it, m);
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_lib() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    // test binary lives in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libpvi_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, SMOKE_C).unwrap();
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(
        run.status.success(),
        "exit {:?}: {}",
        run.status,
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "iter=3 m=4");
}

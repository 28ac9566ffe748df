use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use latentmem::checkpoint;
use latentmem::lm::pretrain::tiny_config;
use latentmem::lm::Backbone;
use latentmem_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = lm_last_error();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { lm_string_free(p) };
    s
}

fn saved_backbone(dir: &Path) -> PathBuf {
    let path = dir.join("bb.lmc");
    checkpoint::save_backbone(&path, &Backbone::<f32>::init(tiny_config(256), 1).unwrap()).unwrap();
    path
}

unsafe fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    lm_string_free(p);
    s
}

#[test]
fn round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(saved_backbone(dir.path()).to_str().unwrap());
    unsafe {
        let mut bb = ptr::null_mut();
        assert_eq!(lm_backbone_load(path.as_ptr(), &mut bb), LmStatus::Ok);
        assert!(lm_last_error().is_null());
        let mut fp = ptr::null_mut();
        assert_eq!(lm_backbone_fingerprint(bb, &mut fp), LmStatus::Ok);
        assert_eq!(take_string(fp).len(), 64);

        let mut bank = ptr::null_mut();
        assert_eq!(lm_bank_bootstrap(bb, 3, 6, 16, &mut bank), LmStatus::Ok);
        let mut n = 0;
        assert_eq!(lm_bank_len(bank, &mut n), LmStatus::Ok);
        assert_eq!(n, 18);

        let saved = cstr(dir.path().join("bank.jsonl").to_str().unwrap());
        assert_eq!(lm_bank_save(bank, saved.as_ptr()), LmStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(lm_bank_load(bb, saved.as_ptr(), 16, &mut loaded), LmStatus::Ok);
        let q = cstr("VALUE OF ab?");
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(lm_bank_query(bank, q.as_ptr(), 3, &mut a), LmStatus::Ok);
        assert_eq!(lm_bank_query(loaded, q.as_ptr(), 3, &mut b), LmStatus::Ok);
        let (a, b) = (take_string(a), take_string(b));
        assert_eq!(a, b);
        let hits: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(hits.as_array().unwrap().len(), 3);

        let mut comp = ptr::null_mut();
        assert_eq!(lm_composer_init(bb, 8, 2, &mut comp), LmStatus::Ok);
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(lm_composer_shape(comp, &mut rows, &mut cols), LmStatus::Ok);
        assert_eq!((rows, cols), (8, 16));
        let role = cstr("checker: verify the draft, give the final answer");
        let mut buf = vec![0f32; 128];
        let mut written = 0;
        assert_eq!(
            lm_composer_compose(comp, bank, role.as_ptr(), q.as_ptr(), 1, buf.as_mut_ptr(), 10, &mut written),
            LmStatus::BufferTooSmall
        );
        assert_eq!(written, 128);
        assert!(last_error().contains("128"));
        assert_eq!(
            lm_composer_compose(comp, bank, role.as_ptr(), q.as_ptr(), 1, buf.as_mut_ptr(), buf.len(), &mut written),
            LmStatus::Ok
        );
        assert!(buf.iter().any(|&v| v != 0.0) && buf.iter().all(|v| v.is_finite()));

        lm_composer_free(comp);
        lm_bank_free(loaded);
        lm_bank_free(bank);
        lm_backbone_free(bb);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut bb = ptr::null_mut();
        assert_eq!(lm_backbone_load(ptr::null(), &mut bb), LmStatus::NullArgument);
        assert!(last_error().contains("path"));
        let missing = cstr("/nonexistent/bb.lmc");
        assert_eq!(lm_backbone_load(missing.as_ptr(), &mut bb), LmStatus::Io);
        assert!(bb.is_null());

        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(lm_backbone_load(bad.as_ptr().cast(), &mut bb), LmStatus::InvalidUtf8);

        let mut out = ptr::null_mut();
        let text = cstr("learning_rat = 0.1\n");
        assert_eq!(lm_config_resolve(text.as_ptr(), &mut out), LmStatus::Config);
        assert!(last_error().contains("learning_rate"));
        let text = cstr("group_size = 4\n");
        assert_eq!(lm_config_resolve(text.as_ptr(), &mut out), LmStatus::Ok);
        assert!(take_string(out).contains("group_size = 4"));

        lm_backbone_free(ptr::null_mut());
        lm_bank_free(ptr::null_mut());
        lm_composer_free(ptr::null_mut());
        lm_string_free(ptr::null_mut());
        assert!(CStr::from_ptr(lm_version()).to_str().unwrap().starts_with("0."));
    }
}

#[test]
fn header_is_generated_and_compiles() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/latentmem.h")).unwrap();
    for name in ["lm_last_error", "lm_string_free", "lm_composer_compose", "LM_STATUS_PANIC", "typedef struct LmBank LmBank"] {
        assert!(header.contains(name), "{name} missing from header");
    }

    // link the C smoke program against the shared library next to this test
    let libdir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !libdir.join("liblatentmem_ffi.so").exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C compile: no cc or no shared library in {}", libdir.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg("-L")
        .arg(&libdir)
        .arg("-llatentmem_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let bb = saved_backbone(dir.path());
    let out = Command::new(&exe).arg(&bb).env("LD_LIBRARY_PATH", &libdir).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.ends_with(" 8 16 128\n"), "{stdout}");
}

use std::ffi::{CStr, CString};
use std::ptr;

use moase::diagnostics::js_divergence;
use moase_ffi::*;

const SMALL: &str = r#"{
  "pretrain": {"max_steps": 400, "min_steps": 100, "validation_size": 200},
  "stream": {"domains": [
    {"name": "noise", "corruption": "gauss-noise", "severity": 3, "duration": 3},
    {"name": "clean", "corruption": "identity", "severity": 1, "duration": 3}
  ]}
}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(moase_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn pretrain_small() -> *mut MoaseModel {
    let cfg = CString::new(SMALL).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { moase_model_pretrain(cfg.as_ptr(), &mut model) };
    assert_eq!(status, MoaseStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

fn logits_of(
    model: *const MoaseModel,
    x: &[f64],
    batch: usize,
    dim: usize,
    classes: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * classes];
    let status =
        unsafe { moase_model_forward(model, x.as_ptr(), batch, dim, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, MoaseStatus::Ok, "{}", last_error());
    out
}

#[test]
fn js_matches_library() {
    let p = [3.0, 1.0, 0.0, 4.0];
    let q = [1.0, 1.0, 2.0, 0.0];
    let mut out = f64::NAN;
    let status = unsafe { moase_js_divergence(p.as_ptr(), q.as_ptr(), p.len(), &mut out) };
    assert_eq!(status, MoaseStatus::Ok);
    assert_eq!(out, js_divergence(&p, &q).unwrap());
    assert_eq!(last_error(), "");
}

#[test]
fn errors_carry_codes_and_messages() {
    let p = [1.0, -1.0];
    let mut out = 0.0;
    let status = unsafe { moase_js_divergence(p.as_ptr(), p.as_ptr(), 2, &mut out) };
    assert_eq!(status, MoaseStatus::InvalidArgument);
    assert!(last_error().contains("non-negative"));

    let status = unsafe { moase_js_divergence(ptr::null(), p.as_ptr(), 2, &mut out) };
    assert_eq!(status, MoaseStatus::NullPointer);

    let bad = CString::new(r#"{"daopd": {"ema_alpha": 2.0}}"#).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { moase_model_pretrain(bad.as_ptr(), &mut model) };
    assert_eq!(status, MoaseStatus::Config);
    assert!(model.is_null());
    assert!(last_error().contains("daopd.ema_alpha"), "{}", last_error());

    let status = unsafe { moase_model_load(ptr::null(), ptr::null(), &mut model) };
    assert_eq!(status, MoaseStatus::NullPointer);
    let missing = CString::new("/nonexistent/source.ckpt").unwrap();
    let status = unsafe { moase_model_load(missing.as_ptr(), ptr::null(), &mut model) };
    assert_eq!(status, MoaseStatus::Io);

    unsafe {
        moase_model_free(ptr::null_mut());
        moase_string_free(ptr::null_mut());
    }
}

#[test]
fn model_round_trip() {
    let model = pretrain_small();
    let (mut dim, mut classes, mut acc) = (0usize, 0usize, 0.0f64);
    assert_eq!(
        unsafe { moase_model_info(model, &mut dim, &mut classes, &mut acc) },
        MoaseStatus::Ok
    );
    assert_eq!((dim, classes), (16, 4));
    assert!(acc > 0.5, "source accuracy {acc}");

    let batch = 3;
    let x: Vec<f64> = (0..batch * dim)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0)
        .collect();
    let before = logits_of(model, &x, batch, dim, classes);
    assert!(before.iter().all(|v| v.is_finite()));

    let mut short = vec![0.0; batch * classes - 1];
    let status = unsafe {
        moase_model_forward(
            model,
            x.as_ptr(),
            batch,
            dim,
            short.as_mut_ptr(),
            short.len(),
        )
    };
    assert_eq!(status, MoaseStatus::Shape);
    let status =
        unsafe { moase_model_forward(model, x.as_ptr(), batch, dim - 1, short.as_mut_ptr(), 64) };
    assert_eq!(status, MoaseStatus::Shape);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { moase_model_save(model, path.as_ptr()) },
        MoaseStatus::Ok
    );
    let mut loaded = ptr::null_mut();
    let cfg = CString::new(SMALL).unwrap();
    let status = unsafe { moase_model_load(path.as_ptr(), cfg.as_ptr(), &mut loaded) };
    assert_eq!(status, MoaseStatus::Ok, "{}", last_error());
    assert_eq!(logits_of(loaded, &x, batch, dim, classes), before);

    let mut json = ptr::null_mut();
    let mode = CString::new("mean-teacher-only").unwrap();
    let status = unsafe { moase_run_episode(loaded, mode.as_ptr(), &mut json) };
    assert_eq!(status, MoaseStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { moase_string_free(json) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["mode"], "mean-teacher-only");
    assert_eq!(v["records"].as_array().unwrap().len(), 6);

    let bogus = CString::new("bogus").unwrap();
    let status = unsafe { moase_run_episode(loaded, bogus.as_ptr(), &mut json) };
    assert_eq!(status, MoaseStatus::Config);

    unsafe {
        moase_model_free(model);
        moase_model_free(loaded);
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(moase_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/moase.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "moase_model_pretrain",
        "moase_model_forward",
        "moase_run_episode",
        "MOASE_STATUS_CONFIG",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\n\
             int main(void) {{\n\
               MoaseModel *m = NULL;\n\
               MoaseStatus s = moase_model_pretrain(NULL, &m);\n\
               if (s != MOASE_STATUS_OK) return (int)s;\n\
               moase_model_free(m);\n\
               return moase_last_error()[0];\n\
             }}\n"
        ),
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn which_cc() -> Result<String, ()> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc).arg("--version").output() {
        Ok(o) if o.status.success() => Ok(cc),
        _ => Err(()),
    }
}

//! C ABI over the `moase` library.
//!
//! Every function returns a [`MoaseStatus`]. On failure the message is kept
//! per thread and can be read with [`moase_last_error`]. Models are opaque
//! handles owned by the caller and released with [`moase_model_free`].
//! Strings handed out by the library must be released with
//! [`moase_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use moase::diagnostics::js_divergence;
use moase::harness::{
    accuracy, pretrain_source, run_episode, source_split, Pretrained, RunConfig, VALIDATION_STREAM,
};
use moase::model::{forward, load_checkpoint, save_checkpoint, Mode, ModelPair};
use moase::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoaseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Numeric = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// A source model together with the run configuration it was built for.
pub struct MoaseModel {
    run: RunConfig,
    source: Pretrained,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MoaseStatus {
    match e {
        Error::Domain(_) => MoaseStatus::InvalidArgument,
        Error::Shape { .. } => MoaseStatus::Shape,
        Error::Config { .. } | Error::Json(_) => MoaseStatus::Config,
        Error::Numeric(_) => MoaseStatus::Numeric,
        Error::Checkpoint { .. } => MoaseStatus::Checkpoint,
        Error::Io(_) => MoaseStatus::Io,
    }
}

struct Fail(MoaseStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MoaseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MoaseStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MoaseStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MoaseStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            MoaseStatus::InvalidArgument,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn read_config(json: *const c_char) -> Result<RunConfig, Fail> {
    if json.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::from_json(read_str(json, "config_json")?)?)
}

fn hand_out(out: *mut *mut MoaseModel, model: MoaseModel) {
    unsafe { *out = Box::into_raw(Box::new(model)) };
}

/// Pretrains a source model. `config_json` may be null for defaults.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string. `out` must be a
/// valid pointer; on success it receives a handle to free with
/// [`moase_model_free`].
#[no_mangle]
pub unsafe extern "C" fn moase_model_pretrain(
    config_json: *const c_char,
    out: *mut *mut MoaseModel,
) -> MoaseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let run = read_config(config_json)?;
        let source = pretrain_source(&run)?;
        hand_out(out, MoaseModel { run, source });
        Ok(())
    })
}

/// Loads a checkpoint. The model section of `config_json` (null for
/// defaults) must match the checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string, `config_json` null or one, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moase_model_load(
    path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut MoaseModel,
) -> MoaseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(read_str(path, "path")?);
        let run = read_config(config_json)?;
        let (cfg, params) = load_checkpoint(&path)?;
        if cfg != run.model {
            return Err(Error::Config {
                path: "model".into(),
                message: "checkpoint was written for a different model config".into(),
            }
            .into());
        }
        let (vx, vy) = source_split(
            &run.stream.task,
            run.seed,
            run.pretrain.validation_size,
            VALIDATION_STREAM,
        );
        let acc = accuracy(&params, &cfg, &vx, &vy)?;
        let source = Pretrained {
            pair: ModelPair::new(cfg, params)?,
            accuracy: acc,
            reached_target: acc >= run.pretrain.target_accuracy,
            steps: 0,
        };
        hand_out(out, MoaseModel { run, source });
        Ok(())
    })
}

/// Writes the source parameters as a text checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn moase_model_save(
    model: *const MoaseModel,
    path: *const c_char,
) -> MoaseStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = PathBuf::from(read_str(path, "path")?);
        save_checkpoint(&path, &m.source.pair.config, m.source.pair.source())?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moase_model_free(model: *mut MoaseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reports the input width, class count and clean validation accuracy.
/// Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn moase_model_info(
    model: *const MoaseModel,
    input_dim: *mut usize,
    classes: *mut usize,
    source_accuracy: *mut f64,
) -> MoaseStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = &m.source.pair.config;
        if !input_dim.is_null() {
            *input_dim = cfg.input_dim;
        }
        if !classes.is_null() {
            *classes = cfg.classes;
        }
        if !source_accuracy.is_null() {
            *source_accuracy = m.source.accuracy;
        }
        Ok(())
    })
}

/// Evaluates the source model on a row-major `[batch, input_dim]` block and
/// writes `batch * classes` logits.
///
/// # Safety
/// `x` must point to `batch * input_dim` doubles and `logits` to
/// `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn moase_model_forward(
    model: *const MoaseModel,
    x: *const f64,
    batch: usize,
    input_dim: usize,
    logits: *mut f64,
    logits_len: usize,
) -> MoaseStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if x.is_null() {
            return Err(null("x"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let cfg = &m.source.pair.config;
        let need = batch * cfg.classes;
        if logits_len < need {
            return Err(Fail(
                MoaseStatus::Shape,
                format!("logits buffer holds {logits_len} values, need {need}"),
            ));
        }
        let input = Tensor::new(
            vec![batch, input_dim],
            std::slice::from_raw_parts(x, batch * input_dim).to_vec(),
        )?;
        let out = forward(m.source.pair.source(), cfg, &input, Mode::Eval)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(out.logits.data());
        Ok(())
    })
}

/// Runs one adaptation episode from the source model and returns its metrics
/// as a JSON document. `mode` overrides the configured mode when non-null.
///
/// # Safety
/// `model` must be a live handle, `mode` null or a NUL-terminated string and
/// `json_out` a valid pointer. Free the returned string with
/// [`moase_string_free`].
#[no_mangle]
pub unsafe extern "C" fn moase_run_episode(
    model: *const MoaseModel,
    mode: *const c_char,
    json_out: *mut *mut c_char,
) -> MoaseStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let mut run = m.run.clone();
        if !mode.is_null() {
            run.mode = read_str(mode, "mode")?.parse()?;
        }
        let metrics = run_episode(&run, &m.source)?;
        let text = serde_json::to_string(&metrics).map_err(Error::from)?;
        *json_out = CString::new(text)
            .map_err(|e| Fail(MoaseStatus::Panic, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// Jensen-Shannon divergence in nats between two histograms of `bins`
/// counts.
///
/// # Safety
/// `p` and `q` must point to `bins` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moase_js_divergence(
    p: *const f64,
    q: *const f64,
    bins: usize,
    out: *mut f64,
) -> MoaseStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(null("histogram"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = std::slice::from_raw_parts(p, bins);
        let q = std::slice::from_raw_parts(q, bins);
        *out = js_divergence(p, q)?;
        Ok(())
    })
}

/// Message for the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn moase_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moase_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moase_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

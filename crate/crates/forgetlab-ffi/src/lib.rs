//! C ABI for the forgetlab toolkit.
//!
//! Conventions:
//! - Functions return [`FlStatus`]; anything but `Ok` leaves a message
//!   retrievable with [`fl_last_error_message`] (thread-local, valid until
//!   the next failing call on the same thread).
//! - `FlModel` is an opaque handle; free it with [`fl_model_free`].
//! - Strings returned through out-parameters are heap-allocated and must be
//!   released with [`fl_string_free`].
//!
//! The header `include/forgetlab.h` is generated at build time by cbindgen.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use forgetlab::error::Error;
use forgetlab::experiment::{run_command, set_jobs, ExperimentConfig};
use forgetlab::metrics::{corpus_bleu_str, greedy_decode};
use forgetlab::nanoformer::Model;

/// Result codes of every C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    /// Runtime failure (I/O, numeric, malformed data).
    RuntimeError = 1,
    /// Invalid configuration or arguments.
    ConfigError = 2,
    /// A required pointer argument was null.
    NullPointer = 3,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 4,
    /// An output buffer was too small.
    BufferTooSmall = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(err: Error) -> FlStatus {
    let status = match err.exit_code() {
        2 => FlStatus::ConfigError,
        _ => FlStatus::RuntimeError,
    };
    set_error(err.to_string());
    status
}

/// Opaque model handle.
pub struct FlModel(Model);

fn model_ref<'a>(ptr: *const FlModel) -> Option<&'a Model> {
    unsafe { ptr.as_ref().map(|m| &m.0) }
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, FlStatus> {
    if ptr.is_null() {
        return Err(FlStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8".into());
        FlStatus::InvalidUtf8
    })
}

fn give_string(s: String, out: *mut *mut c_char) -> FlStatus {
    if out.is_null() {
        set_error("output pointer is null".into());
        return FlStatus::NullPointer;
    }
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            FlStatus::Ok
        }
        Err(_) => {
            set_error("result contained an interior NUL byte".into());
            FlStatus::RuntimeError
        }
    }
}

/// Crate version as a static string; never free it.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, or null if none occurred.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(ptr::null())
    })
}

/// Release a string produced by this library.
///
/// # Safety
/// `s` must have been returned by a forgetlab function; passing it twice is
/// undefined behavior. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Corpus BLEU over newline-separated, whitespace-tokenized sentences.
/// On success `out_report_json` receives a JSON report (bleu, n-gram
/// precisions, brevity penalty, token counts).
///
/// # Safety
/// `hypotheses` and `references` must be valid NUL-terminated strings;
/// `out_report_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_bleu_score(
    hypotheses: *const c_char,
    references: *const c_char,
    out_report_json: *mut *mut c_char,
) -> FlStatus {
    let hyps = match cstr(hypotheses) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let refs = match cstr(references) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let h: Vec<&str> = hyps.lines().collect();
    let r: Vec<&str> = refs.lines().collect();
    match corpus_bleu_str(&h, &r) {
        Ok(report) => give_string(
            serde_json::to_string(&report).expect("report serializes"),
            out_report_json,
        ),
        Err(e) => fail(e),
    }
}

/// Load a checkpoint container from disk. Returns null on failure (consult
/// [`fl_last_error_message`]).
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fl_model_load(path: *const c_char) -> *mut FlModel {
    let Ok(path) = cstr(path) else {
        return ptr::null_mut();
    };
    match Model::load(Path::new(path)) {
        Ok(m) => Box::into_raw(Box::new(FlModel(m))),
        Err(e) => {
            fail(e);
            ptr::null_mut()
        }
    }
}

/// Save a model as a checkpoint container.
///
/// # Safety
/// `model` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn fl_model_save(model: *const FlModel, path: *const c_char) -> FlStatus {
    let Some(m) = model_ref(model) else {
        set_error("model handle is null".into());
        return FlStatus::NullPointer;
    };
    let path = match cstr(path) {
        Ok(p) => p,
        Err(st) => return st,
    };
    match m.save(Path::new(path)) {
        Ok(()) => FlStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Total trainable parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fl_model_param_count(model: *const FlModel) -> u64 {
    model_ref(model).map(|m| m.param_count() as u64).unwrap_or(0)
}

/// Model configuration as JSON.
///
/// # Safety
/// `model` must be a live handle; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_model_config_json(
    model: *const FlModel,
    out_json: *mut *mut c_char,
) -> FlStatus {
    let Some(m) = model_ref(model) else {
        set_error("model handle is null".into());
        return FlStatus::NullPointer;
    };
    give_string(
        serde_json::to_string(m.config()).expect("config serializes"),
        out_json,
    )
}

/// Greedy-decode one source sentence (token ids, EOS included) into
/// `out_tokens`. `out_len` receives the hypothesis length.
///
/// # Safety
/// `model` must be a live handle; `src` must point at `src_len` ids;
/// `out_tokens` must hold `out_cap` entries; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fl_model_greedy_decode(
    model: *const FlModel,
    src: *const u32,
    src_len: usize,
    max_len: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> FlStatus {
    let Some(m) = model_ref(model) else {
        set_error("model handle is null".into());
        return FlStatus::NullPointer;
    };
    if src.is_null() || out_tokens.is_null() || out_len.is_null() {
        set_error("source/output pointers must not be null".into());
        return FlStatus::NullPointer;
    }
    let src = std::slice::from_raw_parts(src, src_len);
    match greedy_decode(m, src, max_len) {
        Ok(hyp) => {
            if hyp.len() > out_cap {
                set_error(format!(
                    "hypothesis of {} tokens exceeds buffer of {out_cap}",
                    hyp.len()
                ));
                return FlStatus::BufferTooSmall;
            }
            let out = std::slice::from_raw_parts_mut(out_tokens, out_cap);
            out[..hyp.len()].copy_from_slice(&hyp);
            *out_len = hyp.len();
            FlStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Release a model handle.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fl_model_free(model: *mut FlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Run one experiment subcommand (forgetting|modules|importance|erasure|
/// drift) against a TOML config, mirroring the CLI. On success
/// `out_run_dir` (optional) receives the run directory path.
///
/// # Safety
/// `command` and `config_path` must be valid strings; `out_run_dir` may be
/// null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_run_experiment(
    command: *const c_char,
    config_path: *const c_char,
    jobs: u32,
    overwrite: bool,
    out_run_dir: *mut *mut c_char,
) -> FlStatus {
    let command = match cstr(command) {
        Ok(c) => c,
        Err(st) => return st,
    };
    let config_path = match cstr(config_path) {
        Ok(c) => c,
        Err(st) => return st,
    };
    let cfg = match ExperimentConfig::load(&PathBuf::from(config_path)) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    set_jobs(jobs as usize);
    match run_command(command, &cfg, overwrite) {
        Ok(dir) => {
            if out_run_dir.is_null() {
                FlStatus::Ok
            } else {
                give_string(dir.display().to_string(), out_run_dir)
            }
        }
        Err(e) => fail(e),
    }
}

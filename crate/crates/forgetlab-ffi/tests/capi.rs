//! Exercises the C ABI exactly as a foreign caller would: raw pointers,
//! NUL-terminated strings, explicit frees.

use std::ffi::{CStr, CString};
use std::ptr;

use forgetlab::corpusgen::EOS;
use forgetlab::nanoformer::{Model, ModelConfig};
use forgetlab_ffi::*;

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { fl_string_free(p) };
    s
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(fl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn bleu_scoring_round_trips_json() {
    let hyps = CString::new("a b c d\nx y z w").unwrap();
    let refs = CString::new("a b c d e\nx y z w").unwrap();
    let mut out: *mut std::ffi::c_char = ptr::null_mut();
    let st = unsafe { fl_bleu_score(hyps.as_ptr(), refs.as_ptr(), &mut out) };
    assert_eq!(st, FlStatus::Ok);
    let json = take_string(out);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let bleu = v["bleu"].as_f64().unwrap();
    assert!(bleu > 80.0 && bleu < 100.0, "{bleu}");

    // Identical corpora score 100.
    let mut out: *mut std::ffi::c_char = ptr::null_mut();
    let st = unsafe { fl_bleu_score(refs.as_ptr(), refs.as_ptr(), &mut out) };
    assert_eq!(st, FlStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
    assert_eq!(v["bleu"].as_f64().unwrap(), 100.0);
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    let mut out: *mut std::ffi::c_char = ptr::null_mut();
    let st = unsafe { fl_bleu_score(ptr::null(), ptr::null(), &mut out) };
    assert_eq!(st, FlStatus::NullPointer);

    // Mismatched corpus sizes are a runtime error with a message.
    let hyps = CString::new("a b\nc d").unwrap();
    let refs = CString::new("a b").unwrap();
    let st = unsafe { fl_bleu_score(hyps.as_ptr(), refs.as_ptr(), &mut out) };
    assert_eq!(st, FlStatus::RuntimeError);
    let msg = unsafe { CStr::from_ptr(fl_last_error_message()) }
        .to_str()
        .unwrap();
    assert!(msg.contains("hypotheses"), "{msg}");
}

#[test]
fn model_handles_load_save_decode() {
    let dir = std::env::temp_dir().join("forgetlab_capi_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.flc");
    let mut cfg = ModelConfig::tiny(30, 30);
    cfg.max_len = 16;
    Model::build(cfg).unwrap().save(&path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let handle = unsafe { fl_model_load(cpath.as_ptr()) };
    assert!(!handle.is_null());
    assert!(unsafe { fl_model_param_count(handle) } > 0);

    let mut out: *mut std::ffi::c_char = ptr::null_mut();
    assert_eq!(
        unsafe { fl_model_config_json(handle, &mut out) },
        FlStatus::Ok
    );
    let cfg_json: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
    assert_eq!(cfg_json["d_model"].as_u64(), Some(32));

    let src = [5u32, 9, EOS];
    let mut hyp = [0u32; 16];
    let mut hyp_len = 0usize;
    let st = unsafe {
        fl_model_greedy_decode(handle, src.as_ptr(), src.len(), 12, hyp.as_mut_ptr(), 16, &mut hyp_len)
    };
    assert_eq!(st, FlStatus::Ok);
    assert!(hyp_len <= 12);

    let save_path = dir.join("copy.flc");
    let csave = CString::new(save_path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fl_model_save(handle, csave.as_ptr()) }, FlStatus::Ok);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&save_path).unwrap());

    unsafe { fl_model_free(handle) };
    std::fs::remove_dir_all(&dir).ok();

    // A bogus path yields null plus an error message.
    let bad = CString::new("/nonexistent/nope.flc").unwrap();
    assert!(unsafe { fl_model_load(bad.as_ptr()) }.is_null());
    assert!(!fl_last_error_message().is_null());
}

#[test]
fn experiment_runner_rejects_unknown_commands_as_config_errors() {
    let dir = std::env::temp_dir().join("forgetlab_capi_exp");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(&cfg_path, format!("out_dir = \"{}\"\n", dir.join("runs").display())).unwrap();
    let cmd = CString::new("nonsense").unwrap();
    let cpath = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let st = unsafe { fl_run_experiment(cmd.as_ptr(), cpath.as_ptr(), 1, true, ptr::null_mut()) };
    assert_eq!(st, FlStatus::ConfigError);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn tiny_experiment_runs_end_to_end_through_the_abi() {
    let dir = std::env::temp_dir().join("forgetlab_capi_drift");
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(
        &cfg_path,
        format!(
            r#"
out_dir = "{}"

[domains]
vocab_size = 50
[domains.general]
train = 200
dev = 20
test = 20
[domains.indomain]
train = 100
dev = 20
test = 20

[train]
epochs = 2
eval_each = 2

[continual]
epochs = 1

[analysis]
t_limit = 20
matrices = ["dec.out.w"]
erasure_eval = 10
decode_max_len = 16
"#,
            dir.join("runs").display()
        ),
    )
    .unwrap();
    let cmd = CString::new("drift").unwrap();
    let cpath = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let mut out_dir: *mut std::ffi::c_char = ptr::null_mut();
    let st = unsafe { fl_run_experiment(cmd.as_ptr(), cpath.as_ptr(), 1, true, &mut out_dir) };
    assert_eq!(st, FlStatus::Ok);
    let run_dir = take_string(out_dir);
    assert!(std::path::Path::new(&run_dir).join("drift.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

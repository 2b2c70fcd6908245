//! C ABI over the specstream decoder.
//!
//! Models are opaque handles created by `ss_model_load` or `ss_model_init`
//! and released with `ss_model_free`. Every fallible call returns an
//! [`SsStatus`]; on failure `ss_last_error` describes what went wrong on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use specstream::model::io::load_model;
use specstream::perf::{parity_zeta, speedup_over_draft_target, PerfParams};
use specstream::{
    generate, msa_batch_size, reference_generate, tree_size, Error, GenerateParams, Model, ModelConfig, Precision,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Parameter = 3,
    Capacity = 4,
    Load = 5,
    Logic = 6,
    Config = 7,
    Training = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

pub const SS_PRECISION_F32: u32 = 0;
pub const SS_PRECISION_F64: u32 = 1;
/// `eos` value meaning "no end-of-sequence token".
pub const SS_NO_EOS: i64 = -1;

/// Opaque model handle.
pub struct SsModel {
    inner: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsModelInfo {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub msa_layers: usize,
    pub num_streams: usize,
    pub max_seq_len: usize,
    pub parameter_count: usize,
}

/// Greedy speculative decoding parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsDecodeParams {
    pub max_new: usize,
    pub gamma: usize,
    pub k: usize,
    pub tau: f64,
    /// Token id, or `SS_NO_EOS`.
    pub eos: i64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SsDecodeMetrics {
    pub generated_tokens: u64,
    pub target_calls: u64,
    pub cr_ratio: f64,
    pub drafted_nodes: u64,
    pub pruned_nodes: u64,
    pub verified_nodes: u64,
    pub total_flops: u64,
}

/// Latency model inputs; see `ss_perf_speedup`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsPerfParams {
    pub gamma: f64,
    pub c_draft: f64,
    pub c_target: f64,
    pub c_ss: f64,
    pub zeta: f64,
    pub beta: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => SsStatus::Shape,
            Error::Parameter(_) => SsStatus::Parameter,
            Error::Capacity(_) => SsStatus::Capacity,
            Error::Config(_) => SsStatus::Config,
            Error::Load { .. } | Error::Json(_) => SsStatus::Load,
            Error::Logic(_) => SsStatus::Logic,
            Error::Training { .. } => SsStatus::Training,
            Error::Io(_) | Error::Csv(_) => SsStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SsStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, recording any failure or panic for `ss_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            SsStatus::Panic
        }
    }
}

fn precision(code: u32) -> Result<Precision, Failure> {
    match code {
        SS_PRECISION_F32 => Ok(Precision::F32),
        SS_PRECISION_F64 => Ok(Precision::F64),
        other => Err(Failure(SsStatus::Parameter, format!("unknown precision code {other}"))),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(SsStatus::Parameter, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const SsModel) -> Result<&'a Model, Failure> {
    p.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn prompt_arg<'a>(p: *const u32, len: usize) -> Result<&'a [u32], Failure> {
    if len == 0 {
        return Err(Failure(SsStatus::Parameter, "prompt is empty".into()));
    }
    if p.is_null() {
        return Err(null("prompt"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn eos_arg(eos: i64) -> Result<Option<u32>, Failure> {
    match eos {
        SS_NO_EOS => Ok(None),
        e => u32::try_from(e).map(Some).map_err(|_| Failure(SsStatus::Parameter, format!("bad eos {e}"))),
    }
}

/// Copies `tokens` into the caller's buffer. `out_len` always receives the
/// full count, so a too-small buffer tells the caller how much to allocate.
unsafe fn write_tokens(tokens: &[u32], out: *mut u32, capacity: usize, out_len: *mut usize) -> Result<(), Failure> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = tokens.len();
    if tokens.len() > capacity {
        return Err(Failure(
            SsStatus::BufferTooSmall,
            format!("{} tokens do not fit a buffer of {capacity}", tokens.len()),
        ));
    }
    if !tokens.is_empty() {
        if out.is_null() {
            return Err(null("out_tokens"));
        }
        ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len());
    }
    Ok(())
}

unsafe fn put_model(model: Model, out: *mut *mut SsModel) {
    *out = Box::into_raw(Box::new(SsModel { inner: model }));
}

/// Message describing the last failure on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model from a weight manifest. `config_path` may be null to use
/// the config the manifest names.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(
    manifest_path: *const c_char,
    config_path: *const c_char,
    precision_code: u32,
    out: *mut *mut SsModel,
) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let manifest = str_arg(manifest_path, "manifest_path")?;
        let config = if config_path.is_null() { None } else { Some(str_arg(config_path, "config_path")?) };
        let model = load_model(manifest, config.map(Path::new), precision(precision_code)?)?;
        put_model(model, out);
        Ok(())
    })
}

/// Creates a randomly initialized model from a JSON config document.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_init(
    config_json: *const c_char,
    seed: u64,
    precision_code: u32,
    out: *mut *mut SsModel,
) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: ModelConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| Failure(SsStatus::Config, e.to_string()))?;
        let model = Model::init(cfg, seed, precision(precision_code)?)?;
        put_model(model, out);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_info(model: *const SsModel, out: *mut SsModelInfo) -> SsStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.config;
        *out = SsModelInfo {
            vocab_size: c.vocab_size,
            hidden_size: c.hidden_size,
            num_layers: c.num_layers,
            msa_layers: c.msa_layers,
            num_streams: c.num_streams,
            max_seq_len: c.max_seq_len,
            parameter_count: m.weights.parameter_count(),
        };
        Ok(())
    })
}

/// γ = 4, k = 1, τ = 0, 32 new tokens, no eos.
#[no_mangle]
pub extern "C" fn ss_decode_params_default() -> SsDecodeParams {
    let d = GenerateParams::default();
    SsDecodeParams { max_new: d.max_new, gamma: d.gamma, k: d.k, tau: d.tau, eos: SS_NO_EOS }
}

/// Greedy speculative generation. Writes the new tokens (prompt excluded)
/// to `out_tokens` and their count to `out_len`. `metrics` may be null.
/// Returns `BUFFER_TOO_SMALL` with `out_len` set when `capacity` is short.
///
/// # Safety
/// `prompt` must hold `prompt_len` tokens, `out_tokens` `capacity` slots;
/// `params` must be readable, `out_len` writable, `metrics` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ss_generate(
    model: *const SsModel,
    prompt: *const u32,
    prompt_len: usize,
    params: *const SsDecodeParams,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    metrics: *mut SsDecodeMetrics,
) -> SsStatus {
    guard(|| {
        let m = model_arg(model)?;
        let prompt = prompt_arg(prompt, prompt_len)?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let gp = GenerateParams {
            max_new: p.max_new,
            gamma: p.gamma,
            k: p.k,
            tau: p.tau,
            eos: eos_arg(p.eos)?,
            ..Default::default()
        };
        let (tokens, dm) = generate(m, prompt, &gp)?;
        if let Some(out) = metrics.as_mut() {
            *out = SsDecodeMetrics {
                generated_tokens: dm.generated_tokens,
                target_calls: dm.target_calls,
                cr_ratio: dm.cr_ratio(),
                drafted_nodes: dm.drafted_nodes,
                pruned_nodes: dm.pruned_nodes,
                verified_nodes: dm.verified_nodes,
                total_flops: dm.flops.total(),
            };
        }
        write_tokens(&tokens, out_tokens, capacity, out_len)
    })
}

/// Plain greedy decoding, one forward per token.
///
/// # Safety
/// As for `ss_generate`.
#[no_mangle]
pub unsafe extern "C" fn ss_reference_generate(
    model: *const SsModel,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    eos: i64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> SsStatus {
    guard(|| {
        let m = model_arg(model)?;
        let prompt = prompt_arg(prompt, prompt_len)?;
        let tokens = reference_generate(m, prompt, max_new, eos_arg(eos)?)?;
        write_tokens(&tokens, out_tokens, capacity, out_len)
    })
}

unsafe fn perf_arg(p: *const SsPerfParams) -> Result<PerfParams, Failure> {
    let p = p.as_ref().ok_or_else(|| null("params"))?;
    let pp = PerfParams {
        gamma: p.gamma,
        c_draft: p.c_draft,
        c_target: p.c_target,
        c_ss: p.c_ss,
        zeta: p.zeta,
        beta: p.beta,
    };
    pp.validate()?;
    Ok(pp)
}

/// Per-token latency of draft-target decoding over speculative streaming.
///
/// # Safety
/// `params` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_perf_speedup(params: *const SsPerfParams, out: *mut f64) -> SsStatus {
    guard(|| {
        let p = perf_arg(params)?;
        *out.as_mut().ok_or_else(|| null("out"))? = speedup_over_draft_target(&p);
        Ok(())
    })
}

/// Draft-target tokens per cycle that break even; `zeta` is ignored.
///
/// # Safety
/// `params` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_perf_parity_zeta(params: *const SsPerfParams, out: *mut f64) -> SsStatus {
    guard(|| {
        let p = perf_arg(params)?;
        *out.as_mut().ok_or_else(|| null("out"))? = parity_zeta(&p);
        Ok(())
    })
}

/// Nodes in a full draft tree: `1 + Σ_{g=1..γ} k^g` (saturating).
#[no_mangle]
pub extern "C" fn ss_tree_size(gamma: usize, k: usize) -> usize {
    tree_size(gamma, k)
}

/// Rows through the multi-stream layers for a full tree: `(1 + γ)·tree_size`.
#[no_mangle]
pub extern "C" fn ss_msa_batch_size(gamma: usize, k: usize) -> usize {
    msa_batch_size(gamma, k)
}

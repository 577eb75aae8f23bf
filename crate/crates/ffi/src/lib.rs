//! C ABI over the engine.
//!
//! Every function returns an [`IpStatus`]. On failure a message is kept
//! per thread and can be read with [`ip_last_error_message`]. Strings
//! returned through out-parameters are owned by the caller and must be
//! released with [`ip_string_free`]. Engines are opaque handles created by
//! [`ip_engine_new`] and released with [`ip_engine_free`].
//!
//! Structured values cross the boundary as UTF-8 JSON text.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use interprompt::backends::ModelClient;
use interprompt::cli::{build_backends, RunConfigFile};
use interprompt::evaluation::{bleu_with, vqa_soft_accuracy, BleuOptions};
use interprompt::model::{normalize_answer, EpisodeConfig, Sample};
use interprompt::pipeline::run_episode;
use interprompt::prompting::{read_examples, ExamplePool};
use interprompt::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ConfigError = 4,
    DataError = 5,
    BackendError = 6,
    BackendUnreachable = 7,
    Panic = 8,
}

/// Opaque engine: backends, example pool and episode config from one run
/// configuration file.
pub struct IpEngine {
    client: ModelClient,
    pool: ExamplePool,
    config: EpisodeConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let msg = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("no interior nul")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(IpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => IpStatus::ConfigError,
            Error::Invalid(_) => IpStatus::InvalidArgument,
            Error::Backend(b) if b.is_unreachable() => IpStatus::BackendUnreachable,
            Error::Backend(_) => IpStatus::BackendError,
            _ => IpStatus::DataError,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IpStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(IpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(IpStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(IpStatus::InvalidArgument, format!("{what}: {e}")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(IpStatus::NullPointer, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn ip_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ip_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds an engine from a run configuration file (JSON).
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_engine_new(config_path: *const c_char, out: *mut *mut IpEngine) -> IpStatus {
    guard(|| {
        let path = read_str(config_path, "config_path")?;
        if out.is_null() {
            return Err(Failure(IpStatus::NullPointer, "out is null".into()));
        }
        let cfg = RunConfigFile::load(Path::new(path))?;
        let pool_path = cfg
            .pool
            .clone()
            .ok_or_else(|| Error::Config("no example pool configured".into()))?;
        let stack = build_backends(&cfg)?;
        let pool = ExamplePool::embed_with(read_examples(&pool_path)?, &stack.client)?;
        let engine = Box::new(IpEngine {
            client: stack.client,
            pool,
            config: cfg.episode,
        });
        write_out(out, Box::into_raw(engine), "out")
    })
}

/// Releases an engine. NULL is ignored.
///
/// # Safety
/// `engine` must come from [`ip_engine_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ip_engine_free(engine: *mut IpEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Replaces the engine's episode config with a JSON object.
///
/// # Safety
/// `engine` must be a live handle; `config_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ip_engine_set_config(engine: *mut IpEngine, config_json: *const c_char) -> IpStatus {
    guard(|| {
        let engine = engine
            .as_mut()
            .ok_or_else(|| Failure(IpStatus::NullPointer, "engine is null".into()))?;
        let cfg: EpisodeConfig = parse_json(read_str(config_json, "config_json")?, "config")
            .map_err(|Failure(_, m)| Failure(IpStatus::ConfigError, m))?;
        cfg.validate()?;
        engine.config = cfg;
        Ok(())
    })
}

/// Current episode config as JSON.
///
/// # Safety
/// `engine` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_engine_config(engine: *const IpEngine, out: *mut *mut c_char) -> IpStatus {
    guard(|| {
        let engine = engine
            .as_ref()
            .ok_or_else(|| Failure(IpStatus::NullPointer, "engine is null".into()))?;
        let text = serde_json::to_string(&engine.config).expect("config serializes");
        write_out(out, into_c_string(text), "out")
    })
}

/// Runs one episode for a sample given as JSON and returns the reasoning
/// trace as JSON. Stage failures are reported inside the trace, not as a
/// status.
///
/// # Safety
/// `engine` must be a live handle; `sample_json` NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ip_engine_run_episode(
    engine: *const IpEngine,
    sample_json: *const c_char,
    out: *mut *mut c_char,
) -> IpStatus {
    guard(|| {
        let engine = engine
            .as_ref()
            .ok_or_else(|| Failure(IpStatus::NullPointer, "engine is null".into()))?;
        let sample: Sample = parse_json(read_str(sample_json, "sample_json")?, "sample")?;
        let trace = run_episode(&sample, &engine.pool, &engine.config, &engine.client);
        let text = serde_json::to_string(&trace).expect("trace serializes");
        write_out(out, into_c_string(text), "out")
    })
}

/// Normalized form of an answer string.
///
/// # Safety
/// `raw` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_normalize_answer(raw: *const c_char, out: *mut *mut c_char) -> IpStatus {
    guard(|| {
        let raw = read_str(raw, "raw")?;
        write_out(out, into_c_string(normalize_answer(raw)), "out")
    })
}

/// Soft VQA accuracy of `pred` against a JSON array of annotator answers.
///
/// # Safety
/// Strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_vqa_soft_accuracy(
    pred: *const c_char,
    answers_json: *const c_char,
    out: *mut f64,
) -> IpStatus {
    guard(|| {
        let pred = read_str(pred, "pred")?;
        let answers: Vec<String> = parse_json(read_str(answers_json, "answers_json")?, "answers")?;
        write_out(out, vqa_soft_accuracy(pred, &answers)?, "out")
    })
}

/// Sentence BLEU of `candidate` against a JSON array of references.
///
/// # Safety
/// Strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_bleu(
    candidate: *const c_char,
    references_json: *const c_char,
    max_n: u32,
    lowercase: bool,
    out: *mut f64,
) -> IpStatus {
    guard(|| {
        let candidate = read_str(candidate, "candidate")?;
        let refs: Vec<String> = parse_json(read_str(references_json, "references_json")?, "references")?;
        let opts = BleuOptions {
            max_n: max_n as usize,
            lowercase,
        };
        write_out(out, bleu_with(candidate, &refs, opts)?, "out")
    })
}

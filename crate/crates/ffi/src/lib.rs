//! C interface to `latentmem`.
//!
//! Every fallible call returns an [`LmStatus`]. On failure the message is kept
//! per thread and can be copied out with [`lm_last_error`]. Strings handed to
//! the caller are owned by the caller and released with [`lm_string_free`];
//! handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use latentmem::bank::{ExperienceBank, TextEmbedder};
use latentmem::checkpoint;
use latentmem::composer::{Composer, ComposerConfig};
use latentmem::config::RunConfig;
use latentmem::lm::Backbone;
use latentmem::mas::{bootstrap_bank, TaskFamily, Topology};
use latentmem::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    InvalidInput = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Frozen language model.
pub struct LmBackbone(Backbone<f32>);

/// Experience bank with its embedder.
pub struct LmBank(ExperienceBank);

/// Memory composer bound to the backbone it was created with.
pub struct LmComposer(Composer<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (LmStatus, String);

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LmStatus {
    match e {
        Error::UnknownKey { .. } | Error::BadValue { .. } | Error::Parse { .. } => LmStatus::Config,
        Error::Io { .. } => LmStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => LmStatus::Checkpoint,
        _ => LmStatus::InvalidInput,
    }
}

fn fail(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LmStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            LmStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((LmStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LmStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (LmStatus::NullArgument, format!("{name} is null")))
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((LmStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn to_c(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (LmStatus::InvalidInput, "string contains a NUL byte".into()))
}

/// Library version as a static NUL-terminated string. Do not free.
#[no_mangle]
pub extern "C" fn lm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the last error message on this thread, or null when the last
/// call succeeded. Free with `lm_string_free`.
#[no_mangle]
pub extern "C" fn lm_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Resolves config text (`key = value` lines) over the defaults and writes
/// the full resolved config to `out`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_config_resolve(text: *const c_char, out: *mut *mut c_char) -> LmStatus {
    guard(|| {
        let text = read_str(text, "text")?;
        check_out(out, "out")?;
        let config = RunConfig::resolve(text, Path::new("<ffi>"), None, &[]).map_err(fail)?;
        *out = to_c(config.echo())?;
        Ok(())
    })
}

/// Loads a backbone checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_backbone_load(path: *const c_char, out: *mut *mut LmBackbone) -> LmStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        check_out(out, "out")?;
        let b = checkpoint::load_backbone(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(LmBackbone(b)));
        Ok(())
    })
}

/// SHA-256 of the backbone parameters as hex.
///
/// # Safety
/// `backbone` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_backbone_fingerprint(backbone: *const LmBackbone, out: *mut *mut c_char) -> LmStatus {
    guard(|| {
        let b = deref(backbone, "backbone")?;
        check_out(out, "out")?;
        *out = to_c(b.0.fingerprint())?;
        Ok(())
    })
}

/// # Safety
/// `backbone` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_backbone_free(backbone: *mut LmBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

fn embedder(backbone: &LmBackbone, embed_chars: usize) -> Result<TextEmbedder, Failure> {
    if embed_chars == 0 {
        return Err((LmStatus::InvalidInput, "embed_chars must be positive".into()));
    }
    Ok(TextEmbedder::new(Arc::clone(&backbone.0.params.tok_embed), embed_chars))
}

/// Reference key/value trajectories for worlds `0..n_worlds`, `per_world`
/// each, two-agent chain.
///
/// # Safety
/// `backbone` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_bank_bootstrap(
    backbone: *const LmBackbone,
    n_worlds: u64,
    per_world: usize,
    embed_chars: usize,
    out: *mut *mut LmBank,
) -> LmStatus {
    guard(|| {
        let b = deref(backbone, "backbone")?;
        check_out(out, "out")?;
        let worlds: Vec<u64> = (0..n_worlds).collect();
        let bank = bootstrap_bank(&[TaskFamily::KvRecall], &worlds, per_world, Topology::Chain2, embedder(b, embed_chars)?)
            .map_err(fail)?;
        *out = Box::into_raw(Box::new(LmBank(bank)));
        Ok(())
    })
}

/// Loads a JSONL bank, embedding with the backbone's token table.
///
/// # Safety
/// `backbone` must be a live handle, `path` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_bank_load(
    backbone: *const LmBackbone,
    path: *const c_char,
    embed_chars: usize,
    out: *mut *mut LmBank,
) -> LmStatus {
    guard(|| {
        let b = deref(backbone, "backbone")?;
        let path = read_str(path, "path")?;
        check_out(out, "out")?;
        let bank = ExperienceBank::load_jsonl(Path::new(path), embedder(b, embed_chars)?).map_err(fail)?;
        *out = Box::into_raw(Box::new(LmBank(bank)));
        Ok(())
    })
}

/// # Safety
/// `bank` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lm_bank_save(bank: *const LmBank, path: *const c_char) -> LmStatus {
    guard(|| {
        let bank = deref(bank, "bank")?;
        let path = read_str(path, "path")?;
        bank.0.save_jsonl(Path::new(path)).map_err(fail)
    })
}

/// # Safety
/// `bank` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_bank_len(bank: *const LmBank, out: *mut usize) -> LmStatus {
    guard(|| {
        let bank = deref(bank, "bank")?;
        check_out(out, "out")?;
        *out = bank.0.len();
        Ok(())
    })
}

/// Top-`k` entries for `query` as a JSON array of
/// `{"index", "similarity", "trajectory"}` objects, best first.
///
/// # Safety
/// `bank` must be a live handle, `query` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lm_bank_query(
    bank: *const LmBank,
    query: *const c_char,
    k: usize,
    out: *mut *mut c_char,
) -> LmStatus {
    guard(|| {
        let bank = deref(bank, "bank")?;
        let query = read_str(query, "query")?;
        check_out(out, "out")?;
        let hits = bank.0.retrieve(query, k).map_err(fail)?;
        let json: Vec<serde_json::Value> = hits
            .iter()
            .map(|h| {
                serde_json::json!({
                    "index": h.index,
                    "similarity": h.similarity,
                    "trajectory": &bank.0.entries()[h.index],
                })
            })
            .collect();
        *out = to_c(serde_json::Value::Array(json).to_string())?;
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_bank_free(bank: *mut LmBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Fresh composer with default sizes except `latent_len`.
///
/// # Safety
/// `backbone` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_composer_init(
    backbone: *const LmBackbone,
    latent_len: usize,
    seed: u64,
    out: *mut *mut LmComposer,
) -> LmStatus {
    guard(|| {
        let b = deref(backbone, "backbone")?;
        check_out(out, "out")?;
        let config = ComposerConfig {
            latent_len,
            ..ComposerConfig::default()
        };
        let c = Composer::init(config, &b.0, seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(LmComposer(c)));
        Ok(())
    })
}

/// Loads composer weights trained against `backbone`.
///
/// # Safety
/// `backbone` must be a live handle, `path` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_composer_load(
    backbone: *const LmBackbone,
    path: *const c_char,
    out: *mut *mut LmComposer,
) -> LmStatus {
    guard(|| {
        let b = deref(backbone, "backbone")?;
        let path = read_str(path, "path")?;
        check_out(out, "out")?;
        let c = checkpoint::load_composer(Path::new(path), &b.0).map_err(fail)?;
        *out = Box::into_raw(Box::new(LmComposer(c)));
        Ok(())
    })
}

/// Shape of every memory this composer produces.
///
/// # Safety
/// `composer` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_composer_shape(composer: *const LmComposer, rows: *mut usize, cols: *mut usize) -> LmStatus {
    guard(|| {
        let c = deref(composer, "composer")?;
        check_out(rows, "rows")?;
        check_out(cols, "cols")?;
        *rows = c.0.config.latent_len;
        *cols = c.0.d_model;
        Ok(())
    })
}

/// Retrieves the top-`k` trajectories for `query` and writes the latent
/// memory for `role` row-major into `buf`. `written` receives the number of
/// floats needed; when `capacity` is smaller nothing is copied and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `buf` valid for `capacity`
/// floats and `written` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_composer_compose(
    composer: *const LmComposer,
    bank: *const LmBank,
    role: *const c_char,
    query: *const c_char,
    k: usize,
    buf: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> LmStatus {
    guard(|| {
        let c = deref(composer, "composer")?;
        let bank = deref(bank, "bank")?;
        let role = read_str(role, "role")?;
        let query = read_str(query, "query")?;
        check_out(written, "written")?;
        let retrieved = bank.0.retrieve_topk(query, k).map_err(fail)?;
        let m = c.0.compose_value(role, &retrieved).map_err(fail)?;
        *written = m.numel();
        if capacity < m.numel() {
            return Err((
                LmStatus::BufferTooSmall,
                format!("memory needs {} floats, buffer holds {capacity}", m.numel()),
            ));
        }
        check_out(buf, "buf")?;
        std::slice::from_raw_parts_mut(buf, m.numel()).copy_from_slice(m.data());
        Ok(())
    })
}

/// # Safety
/// `composer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_composer_free(composer: *mut LmComposer) {
    if !composer.is_null() {
        drop(Box::from_raw(composer));
    }
}

//! C ABI for embedding the adapter models in other languages.
//!
//! Conventions:
//! - Every fallible function returns a [`KadStatus`]; `Ok` is 0.
//! - On failure, [`kad_last_error`] returns a thread-local message valid
//!   until the next failing call on the same thread.
//! - `KadModel` is an opaque handle owned by the caller and released with
//!   [`kad_model_free`].
//! - Buffers are caller-allocated; functions that fill them take a capacity
//!   and report the required length.
//!
//! The header in `include/kadapter.h` is generated with cbindgen
//! (`cbindgen --crate kadapter-ffi --output include/kadapter.h`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kadapter::adapter::{self, AdapterConfig};
use kadapter::backbone::{init_backbone, BackboneConfig};
use kadapter::checkpoint;
use kadapter::corpus::{make_batch, Annotation, EncodedExample};
use kadapter::ndgrad::Graph;
use kadapter::params::Binder;
use kadapter::rng::Rng;
use kadapter::trainer::{AdapterInput, Model};
use kadapter::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum KadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    IoError = 4,
    FormatError = 5,
    RuntimeError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> KadStatus {
    match err {
        Error::Io(_) => KadStatus::IoError,
        Error::Format(_) => KadStatus::FormatError,
        Error::UndefinedLoss(_) => KadStatus::RuntimeError,
        _ => KadStatus::InvalidArgument,
    }
}

fn fail(err: &Error) -> KadStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn guard<F: FnOnce() -> KadStatus>(body: F) -> KadStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            KadStatus::RuntimeError
        }
    }
}

/// Opaque model handle: a backbone plus any loaded adapters.
pub struct KadModel {
    inner: Model,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, KadStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(KadStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        KadStatus::InvalidUtf8
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn kad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread. Valid until the next failing
/// call on the same thread; never NULL.
#[no_mangle]
pub extern "C" fn kad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Create a freshly initialized desk-scale model (no adapters).
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn kad_model_new_desk(
    seed: u64,
    vocab_size: usize,
    out: *mut *mut KadModel,
) -> KadStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return KadStatus::NullPointer;
        }
        let cfg = BackboneConfig::desk(vocab_size);
        if let Err(e) = cfg.validate() {
            return fail(&e);
        }
        let mut rng = Rng::new(seed);
        let store = init_backbone(&cfg, &mut rng);
        let model = Model::backbone_only(cfg, store);
        *out = Box::into_raw(Box::new(KadModel { inner: model }));
        KadStatus::Ok
    })
}

/// Load a backbone checkpoint produced by the `kadapter` CLI.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn kad_model_from_backbone_file(
    path: *const c_char,
    out: *mut *mut KadModel,
) -> KadStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return KadStatus::NullPointer;
        }
        let path = match cstr(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match checkpoint::load_file(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let meta = match ckpt.meta() {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        if meta.kind != "backbone" {
            set_error(&format!(
                "{path:?} is a {:?} checkpoint, expected a backbone",
                meta.kind
            ));
            return KadStatus::InvalidArgument;
        }
        let Some(bcfg) = meta.backbone else {
            set_error("backbone checkpoint carries no configuration");
            return KadStatus::FormatError;
        };
        let model = Model::backbone_only(bcfg, ckpt.store);
        *out = Box::into_raw(Box::new(KadModel { inner: model }));
        KadStatus::Ok
    })
}

/// Attach a pre-trained adapter checkpoint; its features join the fusion in
/// load order.
///
/// # Safety
/// `model` must be a live handle from a constructor; `path` a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kad_model_load_adapter(
    model: *mut KadModel,
    path: *const c_char,
) -> KadStatus {
    guard(|| {
        let Some(model) = model.as_mut() else {
            set_error("null model handle");
            return KadStatus::NullPointer;
        };
        let path = match cstr(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match checkpoint::load_file(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let input = match AdapterInput::from_checkpoint(&ckpt) {
            Ok(i) => i,
            Err(e) => return fail(&e),
        };
        if model.inner.adapters.iter().any(|s| s.name == input.slot.name) {
            set_error(&format!(
                "an adapter named {:?} is already loaded",
                input.slot.name
            ));
            return KadStatus::InvalidArgument;
        }
        if let Err(e) = input.slot.cfg.validate(&model.inner.bcfg) {
            return fail(&e);
        }
        model.inner.store.merge(&input.params);
        model.inner.adapters.push(input.slot);
        KadStatus::Ok
    })
}

/// Width of the feature vector per token (backbone hidden alone, or the
/// fused width once adapters are loaded). Returns 0 on a null handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn kad_model_feature_dim(model: *const KadModel) -> usize {
    match model.as_ref() {
        Some(m) => m.inner.feature_dim(),
        None => 0,
    }
}

/// Number of adapters currently loaded. Returns 0 on a null handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn kad_model_adapter_count(model: *const KadModel) -> usize {
    match model.as_ref() {
        Some(m) => m.inner.adapters.len(),
        None => 0,
    }
}

/// Encode one token sequence and write the fused per-token features
/// (row-major `[len, feature_dim]`) into `out`. `*out_len` receives the
/// required element count; the write happens only when `out_capacity` is
/// large enough.
///
/// # Safety
/// `token_ids` must point to `len` readable u32 values; `out` to
/// `out_capacity` writable doubles (may be NULL when querying the size);
/// `out_len` to one writable usize.
#[no_mangle]
pub unsafe extern "C" fn kad_model_features(
    model: *const KadModel,
    token_ids: *const u32,
    len: usize,
    out: *mut f64,
    out_capacity: usize,
    out_len: *mut usize,
) -> KadStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            set_error("null model handle");
            return KadStatus::NullPointer;
        };
        if token_ids.is_null() || out_len.is_null() {
            set_error("null buffer argument");
            return KadStatus::NullPointer;
        }
        if len == 0 {
            set_error("empty token sequence");
            return KadStatus::InvalidArgument;
        }
        let ids: Vec<usize> = std::slice::from_raw_parts(token_ids, len)
            .iter()
            .map(|&t| t as usize)
            .collect();
        let needed = len * model.inner.feature_dim();
        *out_len = needed;
        if out_capacity < needed {
            set_error(&format!(
                "buffer holds {out_capacity} elements, need {needed}"
            ));
            return KadStatus::InvalidArgument;
        }
        if out.is_null() {
            set_error("null output buffer");
            return KadStatus::NullPointer;
        }
        let row = EncodedExample {
            ids,
            ann: Annotation::DepPretrain { heads: vec![] },
        };
        let batch = match make_batch(std::slice::from_ref(&row)) {
            Ok(b) => b,
            Err(e) => return fail(&e),
        };
        let mut graph = Graph::new();
        let mut binder = Binder::new(&model.inner.store, &[String::new()]);
        let features = match model.inner.features(&mut graph, &mut binder, &batch) {
            Ok(f) => f,
            Err(e) => return fail(&e),
        };
        let data = graph.data(features);
        debug_assert_eq!(data.len(), needed);
        ptr::copy_nonoverlapping(data.as_ptr(), out, needed);
        KadStatus::Ok
    })
}

/// Closed-form trainable-parameter count of one adapter model, from JSON
/// configurations (same schema as the CLI config sections).
///
/// # Safety
/// `backbone_json` and `adapter_json` must be valid NUL-terminated strings;
/// `out` must point to one writable u64.
#[no_mangle]
pub unsafe extern "C" fn kad_param_count(
    backbone_json: *const c_char,
    adapter_json: *const c_char,
    out: *mut u64,
) -> KadStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return KadStatus::NullPointer;
        }
        let bjson = match cstr(backbone_json) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let ajson = match cstr(adapter_json) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let bcfg: BackboneConfig = match serde_json::from_str(bjson) {
            Ok(c) => c,
            Err(e) => return fail(&Error::Json(e)),
        };
        let acfg: AdapterConfig = match serde_json::from_str(ajson) {
            Ok(c) => c,
            Err(e) => return fail(&Error::Json(e)),
        };
        let formula = adapter::param_count(&acfg, &bcfg);
        debug_assert_eq!(formula, adapter::param_count_enumerated(&acfg, &bcfg));
        *out = formula;
        KadStatus::Ok
    })
}

/// Byte-level digest of a checkpoint file, for freezing audits from
/// bindings.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` one writable u64.
#[no_mangle]
pub unsafe extern "C" fn kad_checkpoint_digest(path: *const c_char, out: *mut u64) -> KadStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return KadStatus::NullPointer;
        }
        let path = match cstr(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) => return fail(&Error::Io(e)),
        };
        *out = checkpoint::digest(&bytes);
        KadStatus::Ok
    })
}

/// Release a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must be a handle from a constructor, not yet freed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn kad_model_free(model: *mut KadModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

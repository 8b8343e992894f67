//! C ABI over the tracker.
//!
//! Every function returns a [`ComerStatus`]; on failure a message is kept
//! per thread and read back with [`comer_last_error`]. Strings handed out
//! by the library are released with [`comer_string_free`], models with
//! [`comer_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use comer::belief::BeliefState;
use comer::embeddings::{load_embedding_file, tokenize, EmbeddingError, EmbeddingTable};
use comer::evalbench::{itm, EvalError, ItcClass, ItmInputs};
use comer::hiergen::{Tracker, TurnInput};
use comer::model::ModelError;
use comer::training::{open_checkpoint, Checkpoint, CheckpointError};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Checksum = 6,
    Io = 7,
    Panic = 8,
    Internal = 9,
}

/// Growth class of the inference count.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComerItc {
    Constant = 0,
    Linear = 1,
    Product = 2,
}

/// Opaque loaded model.
pub struct ComerModel {
    checkpoint: Checkpoint,
    table: EmbeddingTable,
}

struct Failure(ComerStatus, String);

impl From<EmbeddingError> for Failure {
    fn from(e: EmbeddingError) -> Self {
        let status = match e {
            EmbeddingError::Checksum { .. } => ComerStatus::Checksum,
            EmbeddingError::Io(_) => ComerStatus::Io,
            EmbeddingError::ZeroDim => ComerStatus::Config,
            _ => ComerStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Embedding(e) => e.into(),
            ModelError::Config(_) | ModelError::MaxLen => Failure(ComerStatus::Config, e.to_string()),
            ModelError::UnknownToken(_) | ModelError::Belief(_) => Failure(ComerStatus::Data, e.to_string()),
            _ => Failure(ComerStatus::Internal, e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Checksum { .. } => Failure(ComerStatus::Checksum, e.to_string()),
            CheckpointError::Io(_) => Failure(ComerStatus::Io, e.to_string()),
            CheckpointError::Format(_) => Failure(ComerStatus::Data, e.to_string()),
            CheckpointError::Model(e) => e.into(),
            CheckpointError::Embedding(e) => e.into(),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ZeroDenominator(_) => Failure(ComerStatus::Numeric, e.to_string()),
            _ => Failure(ComerStatus::Internal, e.to_string()),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

/// Runs `f`, records its error message, and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ComerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ComerStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {message}"));
            ComerStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(ComerStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ComerStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller passes either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(ComerStatus::NullPointer, format!("{name} is null")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(ComerStatus::Internal, "output holds a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn comer_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the calling thread's last failure, or an empty string. The
/// pointer stays valid until the thread's next call into the library.
#[no_mangle]
pub extern "C" fn comer_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. `embedding_path` may be null; it is only read for
/// checkpoints trained on an embedding file, in place of the recorded path.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comer_model_load(
    checkpoint_path: *const c_char,
    embedding_path: *const c_char,
    out: *mut *mut ComerModel,
) -> ComerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(checkpoint_path, "checkpoint_path")?;
        let embeddings = opt_str_arg(embedding_path, "embedding_path")?;
        let opened = open_checkpoint(path, embeddings.map(Path::new))?;
        *out = Box::into_raw(Box::new(ComerModel {
            checkpoint: opened.checkpoint,
            table: opened.table,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`comer_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn comer_model_free(model: *mut ComerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comer_model_param_count(model: *const ComerModel, out: *mut u64) -> ComerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = model
            .as_ref()
            .ok_or_else(|| Failure(ComerStatus::NullPointer, "model is null".into()))?;
        *out = model.checkpoint.model.num_scalars() as u64;
        Ok(())
    })
}

/// Predicts one turn. `system` and `previous_json` may be null; the
/// previous state is a JSON object `{"domain": {"slot": "value"}}`. On
/// success `*out` holds `{"belief": {...}, "flat": "...", "decode_calls": n}`,
/// to be released with [`comer_string_free`].
///
/// # Safety
/// `model` must be a live handle; strings must be null or NUL-terminated;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comer_predict_turn(
    model: *const ComerModel,
    system: *const c_char,
    user: *const c_char,
    previous_json: *const c_char,
    out: *mut *mut c_char,
) -> ComerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = model
            .as_ref()
            .ok_or_else(|| Failure(ComerStatus::NullPointer, "model is null".into()))?;
        let system = opt_str_arg(system, "system")?.unwrap_or("");
        let user = str_arg(user, "user")?;
        let previous = match opt_str_arg(previous_json, "previous_json")? {
            Some(text) => serde_json::from_str::<BeliefState>(text)
                .map_err(|e| Failure(ComerStatus::Data, format!("previous_json: {e}")))?,
            None => BeliefState::new(),
        };
        let tracker = Tracker::new(&model.checkpoint.model, &model.table, &model.checkpoint.frequencies);
        let inp = TurnInput {
            system: tokenize(system),
            user: tokenize(user),
            previous,
        };
        let pred = tracker.predict_turn(&inp)?;
        let json = serde_json::json!({
            "belief": pred.state,
            "flat": pred.state.to_string(),
            "decode_calls": pred.decode_calls(),
        });
        *out = into_c_string(json.to_string())?;
        Ok(())
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn comer_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Inference time multiplier for moving from dataset 1 to dataset 2.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comer_itm(
    t1: f64,
    s1: f64,
    n1: f64,
    m1: f64,
    t2: f64,
    s2: f64,
    n2: f64,
    m2: f64,
    itc: ComerItc,
    out: *mut f64,
) -> ComerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d1 = ItmInputs { t: t1, s: s1, n: n1, m: m1 };
        let d2 = ItmInputs { t: t2, s: s2, n: n2, m: m2 };
        let class = match itc {
            ComerItc::Constant => ItcClass::Constant,
            ComerItc::Linear => ItcClass::Linear,
            ComerItc::Product => ItcClass::Product,
        };
        *out = itm(&d1, &d2, class)?;
        Ok(())
    })
}

/// Validates an embedding file and reports its dimension. `out_dim` may be
/// null.
///
/// # Safety
/// `path` must be NUL-terminated; `out_dim` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn comer_embeddings_validate(path: *const c_char, out_dim: *mut u64) -> ComerStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let table = load_embedding_file(path)?;
        if let Some(d) = out_dim.as_mut() {
            *d = table.dim() as u64;
        }
        Ok(())
    })
}

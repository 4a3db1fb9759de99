//! C ABI over the pathvlm assistant.
//!
//! Fallible functions return a [`PvlmStatus`]. On failure the message is kept
//! per thread and read with [`pvlm_last_error`]. Strings handed out by the
//! library are freed with [`pvlm_string_free`], models with
//! [`pvlm_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pathvlm::assistant::Assistant;
use pathvlm::checkpoint::Checkpoint;
use pathvlm::connector::{plan_tiles, ConnectorConfig};
use pathvlm::eval::open_recall;
use pathvlm::image::{load_image, ImageArray};
use pathvlm::schedules::ScheduleSpec;
use pathvlm::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PvlmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    ContextOverflow = 7,
    Judge = 8,
    Internal = 9,
    Panic = 10,
}

/// Loaded assistant. Opaque to C.
pub struct PvlmModel {
    inner: Assistant,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PvlmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::Image(_) => PvlmStatus::InvalidInput,
            Error::Config(_) | Error::Validation { .. } | Error::Json(_) => PvlmStatus::Config,
            Error::Io { .. } => PvlmStatus::Io,
            Error::Checkpoint(_) => PvlmStatus::Checkpoint,
            Error::ContextOverflow { .. } => PvlmStatus::ContextOverflow,
            Error::Judge(_) | Error::JudgeQuorum { .. } => PvlmStatus::Judge,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PvlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PvlmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PvlmStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(PvlmStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            PvlmStatus::InvalidUtf8,
            format!("`{name}` is not valid UTF-8"),
        )
    })
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

fn to_c(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| {
        Failure(
            PvlmStatus::Internal,
            "generated text contains a NUL byte".into(),
        )
    })
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn pvlm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pvlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an assistant checkpoint directory.
///
/// # Safety
/// `checkpoint_dir` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pvlm_model_load(
    checkpoint_dir: *const c_char,
    out_model: *mut *mut PvlmModel,
) -> PvlmStatus {
    guard(|| {
        let dir = text(checkpoint_dir, "checkpoint_dir")?;
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let ck = Checkpoint::load(Path::new(dir))?;
        let inner = Assistant::from_checkpoint(&ck)?;
        *slot = Box::into_raw(Box::new(PvlmModel { inner }));
        Ok(())
    })
}

/// Frees a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`pvlm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pvlm_model_free(model: *mut PvlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn generate(
    model: *const PvlmModel,
    image: impl FnOnce() -> Result<ImageArray, Failure>,
    question: *const c_char,
    max_new_tokens: usize,
    out_text: *mut *mut c_char,
) -> PvlmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let question = text(question, "question")?;
        let slot = out(out_text, "out_text")?;
        *slot = ptr::null_mut();
        let answer = model.inner.generate(&image()?, question, max_new_tokens)?;
        *slot = to_c(answer)?;
        Ok(())
    })
}

/// Greedy answer for an image given by path or `synth:` reference. The
/// answer is written to `out_text` and must be freed with [`pvlm_string_free`].
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pvlm_model_generate(
    model: *const PvlmModel,
    image_ref: *const c_char,
    question: *const c_char,
    max_new_tokens: usize,
    out_text: *mut *mut c_char,
) -> PvlmStatus {
    let image = || Ok(load_image(text(image_ref, "image_ref")?, None)?);
    generate(model, image, question, max_new_tokens, out_text)
}

/// Same as [`pvlm_model_generate`] for an 8-bit RGB buffer of
/// `height * width * 3` bytes, row-major, channel-last.
///
/// # Safety
/// `rgb` must point to `height * width * 3` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pvlm_model_generate_rgb(
    model: *const PvlmModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    question: *const c_char,
    max_new_tokens: usize,
    out_text: *mut *mut c_char,
) -> PvlmStatus {
    let image = || {
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| Failure(PvlmStatus::InvalidInput, "image size overflows".into()))?;
        let bytes = std::slice::from_raw_parts(rgb, n);
        Ok(ImageArray::new(
            height,
            width,
            bytes.iter().map(|b| f64::from(*b) / 255.0).collect(),
        )?)
    };
    generate(model, image, question, max_new_tokens, out_text)
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pvlm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Fraction of ground-truth tokens present in the prediction.
///
/// # Safety
/// Strings must be NUL-terminated; `out_recall` writable.
#[no_mangle]
pub unsafe extern "C" fn pvlm_open_recall(
    pred: *const c_char,
    gt: *const c_char,
    out_recall: *mut f64,
) -> PvlmStatus {
    guard(|| {
        let r = open_recall(text(pred, "pred")?, text(gt, "gt")?)?;
        *out(out_recall, "out_recall")? = r;
        Ok(())
    })
}

/// Tile grid chosen for an `height`×`width` image.
///
/// # Safety
/// `out_rows` and `out_cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pvlm_plan_tiles(
    height: usize,
    width: usize,
    tile_size: usize,
    max_tiles: usize,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> PvlmStatus {
    guard(|| {
        let rows = out(out_rows, "out_rows")?;
        let cols = out(out_cols, "out_cols")?;
        let cfg = ConnectorConfig {
            tile_size,
            max_tiles,
            ..ConnectorConfig::default()
        };
        let plan = plan_tiles(height, width, &cfg)?;
        *rows = plan.grid_rows;
        *cols = plan.grid_cols;
        Ok(())
    })
}

/// Learning rate at `step` for a schedule given as JSON.
///
/// # Safety
/// `spec_json` must be NUL-terminated; `out_lr` writable.
#[no_mangle]
pub unsafe extern "C" fn pvlm_schedule_lr(
    spec_json: *const c_char,
    step: usize,
    out_lr: *mut f64,
) -> PvlmStatus {
    guard(|| {
        let spec: ScheduleSpec =
            serde_json::from_str(text(spec_json, "spec_json")?).map_err(Error::from)?;
        *out(out_lr, "out_lr")? = spec.lr(step)?;
        Ok(())
    })
}

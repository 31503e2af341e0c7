//! C ABI over the erdetect core: load a model and a detector, classify raw
//! pixels, run erase-and-restore detection and Telea inpainting.
//!
//! Every fallible call returns an [`ErdStatus`]; on failure the message is
//! available from [`erd_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{CStr, CString, c_char};
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::path::PathBuf;

use erdetect::detect::{Detector, detect};
use erdetect::image::{Image, Mask};
use erdetect::inpaint::telea_inpaint;
use erdetect::model::Model;
use erdetect::{Error, rng};

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    DimensionMismatch = 5,
    Precondition = 6,
    ConfigMismatch = 7,
    Panic = 8,
}

/// Opaque classifier handle.
pub struct ErdModel(Model);

/// Opaque detector handle.
pub struct ErdDetector(Detector);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> ErdStatus {
    match e {
        Error::Io { .. } | Error::MissingInput(_) => ErdStatus::Io,
        Error::Malformed { .. } | Error::Version { .. } => ErdStatus::Malformed,
        Error::ShapeMismatch { .. } | Error::DimensionMismatch { .. } => ErdStatus::DimensionMismatch,
        Error::Precondition(_) | Error::SingleClass(_) | Error::Diverged { .. } => ErdStatus::Precondition,
        Error::InvalidArgument(_) | Error::Unknown { .. } | Error::Config(_) => ErdStatus::InvalidArgument,
        Error::ConfigMismatch { .. } => ErdStatus::ConfigMismatch,
    }
}

struct Fail(ErdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ErdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ErdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ErdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ErdStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(path) }
        .to_str()
        .map_err(|_| Fail(ErdStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn model_image(model: &Model, pixels: *const f64, len: usize) -> Result<Image, Fail> {
    let (h, w, c) = model.input_shape();
    let data = unsafe { slice_arg(pixels, len, "pixels") }?;
    Ok(Image::new(h, w, c, data.to_vec())?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[unsafe(no_mangle)]
pub extern "C" fn erd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[unsafe(no_mangle)]
pub extern "C" fn erd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file written by `erdetect train-model`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_model_load(path: *const c_char, out: *mut *mut ErdModel) -> ErdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = Model::load(&unsafe { path_arg(path) }?)?;
        unsafe { *out = Box::into_raw(Box::new(ErdModel(model))) };
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`erd_model_load`] and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_model_free(model: *mut ErdModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes the model's input height, width, channel count and class count.
///
/// # Safety
/// `model` must be a live handle and every out pointer writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_model_shape(
    model: *const ErdModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    num_classes: *mut usize,
) -> ErdStatus {
    guard(|| {
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.0;
        if height.is_null() || width.is_null() || channels.is_null() || num_classes.is_null() {
            return Err(null("out"));
        }
        let (h, w, c) = m.input_shape();
        unsafe {
            *height = h;
            *width = w;
            *channels = c;
            *num_classes = m.num_classes();
        }
        Ok(())
    })
}

/// Classifies `len` HWC pixels in [0, 1]. Writes `num_classes` probabilities
/// into `probs` and the arg-max class into `label`.
///
/// # Safety
/// `pixels` must hold `len` values, `probs` room for `probs_len` values.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_model_predict(
    model: *const ErdModel,
    pixels: *const f64,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
    label: *mut usize,
) -> ErdStatus {
    guard(|| {
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.0;
        let img = unsafe { model_image(m, pixels, len) }?;
        let out = m.forward(&img)?;
        if probs.is_null() || label.is_null() {
            return Err(null("out"));
        }
        if probs_len != out.probs.len() {
            return Err(Error::DimensionMismatch {
                expected: out.probs.len(),
                actual: probs_len,
            }
            .into());
        }
        unsafe {
            std::ptr::copy_nonoverlapping(out.probs.as_ptr(), probs, probs_len);
            *label = out.argmax();
        }
        Ok(())
    })
}

/// Loads a detector file written by `erdetect train-detector`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_detector_load(path: *const c_char, out: *mut *mut ErdDetector) -> ErdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (detector, _) = Detector::load(&unsafe { path_arg(path) }?)?;
        unsafe { *out = Box::into_raw(Box::new(ErdDetector(detector))) };
        Ok(())
    })
}

/// Releases a detector handle; null is ignored.
///
/// # Safety
/// `detector` must come from [`erd_detector_load`] and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_detector_free(detector: *mut ErdDetector) {
    if !detector.is_null() {
        drop(unsafe { Box::from_raw(detector) });
    }
}

/// Erase-and-restore detection of one image with masks drawn from `seed`.
/// Writes 1 (adversarial) or 0 (benign) and the detector score.
///
/// # Safety
/// Handles must be live; `pixels` must hold `len` values; outs writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_detect(
    detector: *const ErdDetector,
    model: *const ErdModel,
    pixels: *const f64,
    len: usize,
    seed: u64,
    adversarial: *mut i32,
    score: *mut f64,
) -> ErdStatus {
    guard(|| {
        let d = &unsafe { detector.as_ref() }.ok_or_else(|| null("detector"))?.0;
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.0;
        let img = unsafe { model_image(m, pixels, len) }?;
        if adversarial.is_null() || score.is_null() {
            return Err(null("out"));
        }
        let v = detect(d, m, &img, &mut rng::from_seed(seed))?;
        unsafe {
            *adversarial = i32::from(v.adversarial);
            *score = v.score;
        }
        Ok(())
    })
}

/// Telea inpainting of an HWC image. `mask` has `height * width` bytes,
/// nonzero marking pixels to restore. Writes `height * width * channels`
/// values into `out`.
///
/// # Safety
/// `pixels` and `out` must hold `height * width * channels` values and `mask`
/// `height * width` bytes.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn erd_inpaint_telea(
    pixels: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    mask: *const u8,
    radius: usize,
    out: *mut f64,
) -> ErdStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Fail(ErdStatus::InvalidArgument, "image size overflows".into()))?;
        let data = unsafe { slice_arg(pixels, n, "pixels") }?;
        let flags = unsafe { slice_arg(mask, height * width, "mask") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = Image::new(height, width, channels, data.to_vec())?;
        let coords = flags
            .iter()
            .enumerate()
            .filter(|(_, f)| **f != 0)
            .map(|(i, _)| (i / width, i % width))
            .collect();
        let restored = telea_inpaint(&img, &Mask::new(height, width, coords)?, radius)?;
        unsafe { std::ptr::copy_nonoverlapping(restored.pixels().as_ptr(), out, n) };
        Ok(())
    })
}

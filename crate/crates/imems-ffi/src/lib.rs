//! C ABI over the channel codec and the segmentation metrics.
//!
//! Conventions:
//! - Images are row-major byte arrays; masks hold one label id per pixel.
//! - Objects live behind opaque handles created by `*_new`/`imems_encode`
//!   and released by the matching `*_free`.
//! - Every fallible call returns an [`ImemsStatus`]; on failure,
//!   [`imems_last_error`] gives a message for the calling thread.
//! - Panics never cross the boundary; they turn into `Panic` status.

use std::cell::RefCell;
use std::ffi::CString;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use imems::embedding::{self, EmbeddedImage, GrayImage, SegMap};
use imems::evaluation::{compute_metrics, ConfusionMatrix};
use imems::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImemsStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// An argument was out of range or inconsistent (bad label, size
    /// mismatch, wrong buffer length).
    InvalidArgument = 2,
    /// The data violates a codec invariant (for example a pixel without
    /// exactly one foreground value).
    Integrity = 3,
    /// Any other runtime failure.
    Runtime = 4,
    /// A panic was caught at the boundary; state may be inconsistent.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).expect("no interior NUL"));
}

fn status_of(err: &Error) -> ImemsStatus {
    set_error(&err.to_string());
    match err {
        Error::Integrity(_) => ImemsStatus::Integrity,
        e if e.is_usage() => ImemsStatus::InvalidArgument,
        _ => ImemsStatus::Runtime,
    }
}

fn invalid(msg: &str) -> ImemsStatus {
    set_error(msg);
    ImemsStatus::InvalidArgument
}

fn null_arg() -> ImemsStatus {
    set_error("a required pointer was null");
    ImemsStatus::NullArgument
}

fn guarded(body: impl FnOnce() -> ImemsStatus) -> ImemsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            ImemsStatus::Panic
        }
    }
}

/// Message for the most recent failure on this thread, NUL terminated. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn imems_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// An encoded image: one grayscale channel per label.
pub struct ImemsEmbedded(EmbeddedImage);

/// A pooled pixel-count confusion matrix.
pub struct ImemsConfusion(ConfusionMatrix);

/// Scalar scores of a confusion matrix. Per-class F values come from
/// `imems_confusion_class_f`.
#[repr(C)]
pub struct ImemsMetrics {
    /// Fraction of pixels whose predicted label matches the ground truth.
    pub accuracy: f64,
    /// Unweighted mean of the per-class F measures.
    pub average_f: f64,
}

/// Encode a grayscale image and its label mask into per-label channels.
///
/// `gray` and `labels` hold `width * height` bytes each; every label must be
/// below `num_labels` (2..=256). On success `*out` owns the new object and
/// must be released with `imems_embedded_free`.
///
/// # Safety
/// `gray` and `labels` must point to `width * height` readable bytes, and
/// `out` must be a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn imems_encode(
    gray: *const u8,
    width: u32,
    height: u32,
    labels: *const u8,
    num_labels: u32,
    out: *mut *mut ImemsEmbedded,
) -> ImemsStatus {
    guarded(|| {
        if gray.is_null() || labels.is_null() || out.is_null() {
            return null_arg();
        }
        let n = width as usize * height as usize;
        let gray_vec = std::slice::from_raw_parts(gray, n).to_vec();
        let label_vec = std::slice::from_raw_parts(labels, n).to_vec();
        let image = match GrayImage::new(width, height, gray_vec) {
            Ok(i) => i,
            Err(e) => return status_of(&e),
        };
        let mask = match SegMap::new(width, height, num_labels as usize, label_vec) {
            Ok(m) => m,
            Err(e) => return status_of(&e),
        };
        match embedding::encode(&image, &mask) {
            Ok(embedded) => {
                *out = Box::into_raw(Box::new(ImemsEmbedded(embedded)));
                ImemsStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Release an embedded image. Passing null is a no-op.
///
/// # Safety
/// `handle` must come from `imems_encode` and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn imems_embedded_free(handle: *mut ImemsEmbedded) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Channel count of an embedded image.
///
/// # Safety
/// `handle` must be a live pointer from `imems_encode`; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn imems_embedded_num_labels(
    handle: *const ImemsEmbedded,
    out: *mut u32,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || out.is_null() {
            return null_arg();
        }
        *out = (*handle).0.num_labels() as u32;
        ImemsStatus::Ok
    })
}

/// Pixel dimensions of an embedded image.
///
/// # Safety
/// `handle` must be a live pointer from `imems_encode`; `width` and `height`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn imems_embedded_size(
    handle: *const ImemsEmbedded,
    width: *mut u32,
    height: *mut u32,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || width.is_null() || height.is_null() {
            return null_arg();
        }
        *width = (*handle).0.width();
        *height = (*handle).0.height();
        ImemsStatus::Ok
    })
}

/// Copy one channel (`width * height` bytes) into `buf`.
///
/// # Safety
/// `handle` must be live; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn imems_embedded_channel(
    handle: *const ImemsEmbedded,
    channel: u32,
    buf: *mut u8,
    len: usize,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || buf.is_null() {
            return null_arg();
        }
        let embedded = &(*handle).0;
        if channel as usize >= embedded.num_labels() {
            return invalid("channel index out of range");
        }
        let data = embedded.channel(channel as usize);
        if len != data.len() {
            return invalid("buffer length does not match width * height");
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(data);
        ImemsStatus::Ok
    })
}

/// Decode the embedded channels to a label per pixel (argmax).
///
/// # Safety
/// `handle` must be live; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn imems_decode(
    handle: *const ImemsEmbedded,
    buf: *mut u8,
    len: usize,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || buf.is_null() {
            return null_arg();
        }
        let seg = embedding::decode(&(*handle).0);
        if len != seg.labels().len() {
            return invalid("buffer length does not match width * height");
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(seg.labels());
        ImemsStatus::Ok
    })
}

/// Reconstruct the grayscale image carried by the channels. Fails with
/// `Integrity` when any pixel lacks exactly one foreground value.
///
/// # Safety
/// `handle` must be live; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn imems_recover_grayscale(
    handle: *const ImemsEmbedded,
    buf: *mut u8,
    len: usize,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || buf.is_null() {
            return null_arg();
        }
        match embedding::recover_grayscale(&(*handle).0) {
            Ok(gray) => {
                if len != gray.data().len() {
                    return invalid("buffer length does not match width * height");
                }
                std::slice::from_raw_parts_mut(buf, len).copy_from_slice(gray.data());
                ImemsStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Create an empty confusion matrix for `num_labels` classes (2..=256).
///
/// # Safety
/// `out` must be a valid writable pointer. Release the result with
/// `imems_confusion_free`.
#[no_mangle]
pub unsafe extern "C" fn imems_confusion_new(
    num_labels: u32,
    out: *mut *mut ImemsConfusion,
) -> ImemsStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg();
        }
        match ConfusionMatrix::new(num_labels as usize) {
            Ok(cm) => {
                *out = Box::into_raw(Box::new(ImemsConfusion(cm)));
                ImemsStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Release a confusion matrix. Passing null is a no-op.
///
/// # Safety
/// `handle` must come from `imems_confusion_new` and not have been freed
/// already.
#[no_mangle]
pub unsafe extern "C" fn imems_confusion_free(handle: *mut ImemsConfusion) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Pool one image pair into the matrix: `gt` and `pred` hold one label per
/// pixel for the same `width * height` image.
///
/// # Safety
/// `handle` must be live; `gt` and `pred` must point to `width * height`
/// readable bytes.
#[no_mangle]
pub unsafe extern "C" fn imems_confusion_accumulate(
    handle: *mut ImemsConfusion,
    gt: *const u8,
    pred: *const u8,
    width: u32,
    height: u32,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || gt.is_null() || pred.is_null() {
            return null_arg();
        }
        let cm = &mut (*handle).0;
        let n = width as usize * height as usize;
        let k = cm.num_labels();
        let gt_map = match SegMap::new(width, height, k, std::slice::from_raw_parts(gt, n).to_vec())
        {
            Ok(m) => m,
            Err(e) => return status_of(&e),
        };
        let pred_map =
            match SegMap::new(width, height, k, std::slice::from_raw_parts(pred, n).to_vec()) {
                Ok(m) => m,
                Err(e) => return status_of(&e),
            };
        match cm.accumulate(&gt_map, &pred_map) {
            Ok(()) => ImemsStatus::Ok,
            Err(e) => status_of(&e),
        }
    })
}

/// Accuracy and mean F of everything pooled so far. Fails with
/// `InvalidArgument` when the matrix is still empty.
///
/// # Safety
/// `handle` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imems_confusion_metrics(
    handle: *const ImemsConfusion,
    out: *mut ImemsMetrics,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || out.is_null() {
            return null_arg();
        }
        match compute_metrics(&(*handle).0) {
            Ok(report) => {
                *out = ImemsMetrics {
                    accuracy: report.accuracy,
                    average_f: report.average_f,
                };
                ImemsStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// F measure of one class (1.0 for a class absent from both ground truth
/// and predictions).
///
/// # Safety
/// `handle` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imems_confusion_class_f(
    handle: *const ImemsConfusion,
    class: u32,
    out: *mut f64,
) -> ImemsStatus {
    guarded(|| {
        if handle.is_null() || out.is_null() {
            return null_arg();
        }
        let cm = &(*handle).0;
        if class as usize >= cm.num_labels() {
            return invalid("class index out of range");
        }
        match compute_metrics(cm) {
            Ok(report) => {
                *out = report.per_class_f[class as usize];
                ImemsStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

//! C ABI for loading a trained detector and scoring images.
//!
//! Every fallible function returns an [`SfStatus`]; on failure the message is
//! available from [`sf_last_error`] on the same thread until the next call.
//! Handles are opaque and released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use semaforge::branches::{fuse, load_model, predict, DetectorModel, PossibilityMatrix, WeightMatrix};
use semaforge::eval::roc_auc;
use semaforge::imageio::load_png;
use semaforge::mfss::{load_landmarks, LandmarkSet, Point, NUM_LANDMARKS};
use semaforge::{Error, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Contract = 4,
    State = 5,
    Parse = 6,
    Format = 7,
    Geometry = 8,
    DegenerateFragment = 9,
    NonFinite = 10,
    Io = 11,
    Json = 12,
    Image = 13,
    Panic = 14,
}

impl From<&Error> for SfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => SfStatus::Dimension,
            Error::Contract(_) => SfStatus::Contract,
            Error::State(_) => SfStatus::State,
            Error::Parse { .. } => SfStatus::Parse,
            Error::Format(_) => SfStatus::Format,
            Error::Geometry(_) => SfStatus::Geometry,
            Error::DegenerateFragment(_) => SfStatus::DegenerateFragment,
            Error::NonFinite(_) => SfStatus::NonFinite,
            Error::Io { .. } => SfStatus::Io,
            Error::Json(_) => SfStatus::Json,
            Error::Image { .. } => SfStatus::Image,
        }
    }
}

/// Opaque trained detector.
pub struct SfModel {
    inner: DetectorModel,
}

/// Output of one prediction. Label 0 is fake, 1 is real.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SfPrediction {
    pub label: i32,
    /// Fused scores `[fake, real]`.
    pub scores: [f64; 2],
    /// `scores[0] / (scores[0] + scores[1])`.
    pub fake_score: f64,
    /// Possibility matrix, row-major 2×6 (row 0 fake, row 1 real), fragment
    /// order p, b, f, e, m, n.
    pub possibility: [f64; 12],
    /// Fragment weights in the same order.
    pub weights: [f64; 6],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SfStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SfStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".to_string());
            SfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SfStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const SfModel) -> Result<&'a DetectorModel, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn fill(out: &mut SfPrediction, pred: &semaforge::branches::Prediction) {
    *out = SfPrediction {
        label: pred.label.index() as i32,
        scores: pred.scores,
        fake_score: pred.fake_score(),
        possibility: std::array::from_fn(|k| pred.p.cols[k % 6][k / 6]),
        weights: pred.w.w,
    };
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model directory written by `semaforge train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(dir: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let inner = load_model(&dir)?;
        *out = Box::into_raw(Box::new(SfModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`sf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the model's fragment crops, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_fragment_size(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.fragment_size())
}

/// Scores an RGB image given as `height·width·3` interleaved values in
/// [0, 1] and 81 landmarks as `x0, y0, x1, y1, …` pixel coordinates.
///
/// # Safety
/// `pixels` must point to `height·width·3` values, `landmarks` to 162
/// values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_predict(
    model: *const SfModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    landmarks: *const f64,
    out: *mut SfPrediction,
) -> SfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if landmarks.is_null() {
            return Err(null("landmarks"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Failure(SfStatus::Contract, "image size overflows".into()))?;
        let img = Tensor::new(&[height, width, 3], std::slice::from_raw_parts(pixels, n).to_vec())?;
        let xy = std::slice::from_raw_parts(landmarks, 2 * NUM_LANDMARKS);
        let lm = LandmarkSet::new(xy.chunks(2).map(|c| Point { x: c[0], y: c[1] }).collect())?;
        fill(out, &predict(m, &img, &lm)?);
        Ok(())
    })
}

/// Scores a PNG file with its landmark file.
///
/// # Safety
/// Paths must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sf_predict_files(
    model: *const SfModel,
    image_path: *const c_char,
    landmarks_path: *const c_char,
    out: *mut SfPrediction,
) -> SfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let img = load_png(&path_arg(image_path, "image_path")?)?;
        let lm = load_landmarks(&path_arg(landmarks_path, "landmarks_path")?)?;
        fill(out, &predict(m, &img, &lm)?);
        Ok(())
    })
}

/// Fused scores `Σᵢ wᵢ·P[y][i]` for a row-major 2×6 possibility matrix and
/// six weights.
///
/// # Safety
/// `possibility` must point to 12 values, `weights` to 6, `out` to 2.
#[no_mangle]
pub unsafe extern "C" fn sf_fuse(possibility: *const f64, weights: *const f64, out: *mut f64) -> SfStatus {
    guard(|| {
        if possibility.is_null() || weights.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let p = std::slice::from_raw_parts(possibility, 12);
        let w = std::slice::from_raw_parts(weights, 6);
        let pm = PossibilityMatrix {
            cols: std::array::from_fn(|i| [p[i], p[6 + i]]),
        };
        let wm = WeightMatrix {
            w: std::array::from_fn(|i| w[i]),
        };
        let s = fuse(&pm, &wm);
        std::slice::from_raw_parts_mut(out, 2).copy_from_slice(&s);
        Ok(())
    })
}

/// Trapezoidal ROC AUC with `positive[i] != 0` marking positives.
///
/// # Safety
/// `scores` and `positive` must point to `n` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_roc_auc(scores: *const f64, positive: *const u8, n: usize, out: *mut f64) -> SfStatus {
    guard(|| {
        if scores.is_null() || positive.is_null() {
            return Err(null("argument"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = std::slice::from_raw_parts(scores, n);
        let y: Vec<bool> = std::slice::from_raw_parts(positive, n).iter().map(|&b| b != 0).collect();
        *out = roc_auc(s, &y)?.1;
        Ok(())
    })
}

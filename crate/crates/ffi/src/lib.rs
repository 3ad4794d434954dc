//! C ABI over the digebench core.
//!
//! Every fallible function returns a [`DgStatus`]; on failure the message is
//! kept per thread and read with [`dg_last_error_message`]. Handles are
//! opaque and must be released with their matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use digebench::datastore::{load_cohort, Cohort, SurvivalRecord};
use digebench::mil::{Bag, MilModel};
use digebench::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgStatus {
    Ok = 0,
    InvalidInput = 1,
    Shape = 2,
    NonFinite = 3,
    Io = 4,
    BadMagic = 5,
    VersionMismatch = 6,
    Truncated = 7,
    Schema = 8,
    Undefined = 9,
    Unsatisfiable = 10,
    NonConvergence = 11,
    Degenerate = 12,
    Config = 13,
    NullPointer = 14,
    Panic = 15,
}

impl From<&Error> for DgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => DgStatus::InvalidInput,
            Error::Shape(_) => DgStatus::Shape,
            Error::NonFinite(_) => DgStatus::NonFinite,
            Error::Io { .. } => DgStatus::Io,
            Error::BadMagic { .. } => DgStatus::BadMagic,
            Error::VersionMismatch { .. } => DgStatus::VersionMismatch,
            Error::Truncated { .. } => DgStatus::Truncated,
            Error::Schema { .. } | Error::MissingFeatureFile { .. } | Error::DuplicateId { .. } => DgStatus::Schema,
            Error::Undefined(_) => DgStatus::Undefined,
            Error::Unsatisfiable(_) => DgStatus::Unsatisfiable,
            Error::NonConvergence(_) => DgStatus::NonConvergence,
            Error::Degenerate(_) => DgStatus::Degenerate,
            Error::Config(_) => DgStatus::Config,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, turning errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (DgStatus, String)>>(f: F) -> DgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DgStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (DgStatus, String)>;
}

impl<T> IntoFfi<T> for digebench::Result<T> {
    fn ffi(self) -> Result<T, (DgStatus, String)> {
        self.map_err(|e| (DgStatus::from(&e), e.to_string()))
    }
}

fn null(what: &str) -> (DgStatus, String) {
    (DgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (DgStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], (DgStatus, String)> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, (DgStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (DgStatus::InvalidInput, "path is not UTF-8".into()))
}

unsafe fn records(times: *const f64, events: *const u8, n: usize) -> Result<Vec<SurvivalRecord>, (DgStatus, String)> {
    let t = slice(times, n, "times")?;
    let e = slice(events, n, "events")?;
    t.iter().zip(e).map(|(&t, &e)| SurvivalRecord::new(t, e != 0).ffi()).collect()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn dg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dg_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr() as *const c_char
}

pub struct DgCohort {
    inner: Cohort,
}

pub struct DgMilModel {
    inner: MilModel,
}

/// Loads a cohort from its JSONL manifest.
#[no_mangle]
pub unsafe extern "C" fn dg_cohort_load(manifest: *const c_char, out: *mut *mut DgCohort) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cohort = load_cohort(path(manifest)?).ffi()?;
        *out = Box::into_raw(Box::new(DgCohort { inner: cohort }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dg_cohort_free(cohort: *mut DgCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Number of slides, 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dg_cohort_len(cohort: *const DgCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.inner.slides.len())
}

#[no_mangle]
pub unsafe extern "C" fn dg_cohort_dim(cohort: *const DgCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.inner.dim)
}

#[no_mangle]
pub unsafe extern "C" fn dg_cohort_n_patches(cohort: *const DgCohort, slide: usize) -> usize {
    cohort.as_ref().and_then(|c| c.inner.slides.get(slide)).map_or(0, |s| s.n_patches())
}

#[no_mangle]
pub unsafe extern "C" fn dg_mil_model_load(file: *const c_char, out: *mut *mut DgMilModel) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = MilModel::load(path(file)?).ffi()?;
        *out = Box::into_raw(Box::new(DgMilModel { inner: model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dg_mil_model_free(model: *mut DgMilModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn dg_mil_model_n_classes(model: *const DgMilModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_classes())
}

unsafe fn slide_bag(cohort: *const DgCohort, slide: usize) -> Result<Bag, (DgStatus, String)> {
    let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
    let s = c
        .inner
        .slides
        .get(slide)
        .ok_or_else(|| (DgStatus::InvalidInput, format!("slide {slide} out of range")))?;
    Bag::from_slide(s).ffi()
}

/// Writes the class probabilities of one slide into `out` (length
/// `n_classes`).
#[no_mangle]
pub unsafe extern "C" fn dg_mil_predict(
    model: *const DgMilModel,
    cohort: *const DgCohort,
    slide: usize,
    out: *mut f64,
    n_classes: usize,
) -> DgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n_classes != m.inner.n_classes() {
            return Err((DgStatus::Shape, format!("buffer of {n_classes} for {} classes", m.inner.n_classes())));
        }
        let p = m.inner.predict_proba(&slide_bag(cohort, slide)?).ffi()?;
        slice_mut(out, n_classes, "out")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Writes the attention weights of one slide into `out` (length
/// `n_patches`), in the slide's patch order.
#[no_mangle]
pub unsafe extern "C" fn dg_mil_attention(
    model: *const DgMilModel,
    cohort: *const DgCohort,
    slide: usize,
    out: *mut f64,
    n_patches: usize,
) -> DgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let bag = slide_bag(cohort, slide)?;
        if n_patches != bag.len() {
            return Err((DgStatus::Shape, format!("buffer of {n_patches} for {} patches", bag.len())));
        }
        let a = m.inner.attention_weights(&bag).ffi()?;
        slice_mut(out, n_patches, "out")?.copy_from_slice(&a);
        Ok(())
    })
}

/// Cox negative log partial likelihood; `grad` (length `n`) may be null.
#[no_mangle]
pub unsafe extern "C" fn dg_cox_loss(
    theta: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> DgStatus {
    guard(|| {
        let th = slice(theta, n, "theta")?;
        let recs = records(times, events, n)?;
        let loss = loss.as_mut().ok_or_else(|| null("loss"))?;
        if grad.is_null() {
            *loss = digebench::survival::cox_loss(th, &recs).ffi()?;
        } else {
            let (l, g) = digebench::survival::cox_loss_and_grad(th, &recs).ffi()?;
            slice_mut(grad, n, "grad")?.copy_from_slice(&g);
            *loss = l;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dg_c_index(theta: *const f64, times: *const f64, events: *const u8, n: usize, out: *mut f64) -> DgStatus {
    guard(|| {
        let th = slice(theta, n, "theta")?;
        let recs = records(times, events, n)?;
        *out.as_mut().ok_or_else(|| null("out"))? = digebench::survival::c_index(th, &recs).ffi()?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dg_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DgStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&x| x != 0).collect();
        *out.as_mut().ok_or_else(|| null("out"))? = digebench::metrics::auroc(s, &l).ffi()?;
        Ok(())
    })
}

/// Tumor and non-tumor ROI budgets for slide probability `p_tumor`.
#[no_mangle]
pub unsafe extern "C" fn dg_roi_budgets(p_tumor: f64, n_tumor: *mut usize, n_nontumor: *mut usize) -> DgStatus {
    guard(|| {
        let t = digebench::sampler::tumor_budget(p_tumor).ffi()?;
        let nt = digebench::sampler::nontumor_budget(p_tumor).ffi()?;
        *n_tumor.as_mut().ok_or_else(|| null("n_tumor"))? = t;
        *n_nontumor.as_mut().ok_or_else(|| null("n_nontumor"))? = nt;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dg_chi_square_sf(x: f64, df: u32, out: *mut f64) -> DgStatus {
    guard(|| {
        *out.as_mut().ok_or_else(|| null("out"))? = digebench::numerics::chi_square_sf(x, df).ffi()?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DgOperatingPoint {
    pub threshold: f64,
    pub target_sensitivity: f64,
    pub achieved_sensitivity: f64,
    pub achieved_specificity: f64,
    pub calibration_n: usize,
}

#[no_mangle]
pub unsafe extern "C" fn dg_calibrate_threshold(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    target_sensitivity: f64,
    out: *mut DgOperatingPoint,
) -> DgStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&x| x != 0).collect();
        let op = digebench::screening::calibrate_threshold(s, &l, target_sensitivity).ffi()?;
        *out.as_mut().ok_or_else(|| null("out"))? = DgOperatingPoint {
            threshold: op.threshold,
            target_sensitivity: op.target_sensitivity,
            achieved_sensitivity: op.achieved_sensitivity,
            achieved_specificity: op.achieved_specificity,
            calibration_n: op.calibration_n,
        };
        Ok(())
    })
}

//! C ABI over `vidcount`.
//!
//! Every function returns a [`VcStatus`]; on failure the message is
//! available from [`vc_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vidcount::annotations::{render_density, ClipAnnotation, KernelSpec};
use vidcount::grid::{DensityMap, Image};
use vidcount::losses::evaluate;
use vidcount::motion::{estimate_flow, FlowEstimatorSpec};
use vidcount::nn::{Checkpoint, Model};
use vidcount::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Annotation = 7,
    Checkpoint = 8,
    Backend = 9,
    NonFinite = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcKernel {
    Fixed = 0,
    Adaptive = 1,
}

/// Clip annotation loaded from JSON.
pub struct VcAnnotation(ClipAnnotation);

/// Density map; its sum is the predicted or ground-truth count.
pub struct VcDensityMap(DensityMap);

/// Trained model restored from a checkpoint.
pub struct VcModel {
    model: Model,
    checkpoint: Checkpoint,
}

struct Failure(VcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Annotation { .. } => VcStatus::Annotation,
            Error::Shape(_) | Error::Empty(_) => VcStatus::Shape,
            Error::Config(_) => VcStatus::Config,
            Error::NonFinite(_) => VcStatus::NonFinite,
            Error::Format { .. } | Error::Json(_) | Error::Image(_) => VcStatus::Format,
            Error::Checkpoint(_) => VcStatus::Checkpoint,
            Error::Backend(_) => VcStatus::Backend,
            Error::Io { .. } => VcStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> VcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            VcStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            VcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(VcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(VcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn store<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = value;
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn vc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ------------------------------------------------------------ annotations

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vc_annotation_load(path: *const c_char, out: *mut *mut VcAnnotation) -> VcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        emit(out, VcAnnotation(ClipAnnotation::load(path)?))
    })
}

/// # Safety
/// `ann` must come from [`vc_annotation_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_annotation_frame_count(ann: *const VcAnnotation, out: *mut usize) -> VcStatus {
    guard(|| store(out, handle(ann, "annotation")?.0.frames.len()))
}

/// Number of annotated heads in frame `index`.
///
/// # Safety
/// `ann` must come from [`vc_annotation_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_annotation_head_count(ann: *const VcAnnotation, index: usize, out: *mut usize) -> VcStatus {
    guard(|| {
        let a = &handle(ann, "annotation")?.0;
        let frame = a
            .frames
            .get(index)
            .ok_or_else(|| Failure(VcStatus::InvalidArgument, format!("frame {index} out of range")))?;
        store(out, frame.count())
    })
}

/// # Safety
/// `ann` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vc_annotation_free(ann: *mut VcAnnotation) {
    if !ann.is_null() {
        drop(Box::from_raw(ann));
    }
}

// ------------------------------------------------------------ density maps

/// Renders the ground-truth density of frame `index`. `sigma` is used by
/// the fixed kernel; `beta` and `k` by the adaptive one.
///
/// # Safety
/// `ann` must come from [`vc_annotation_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_density_render(
    ann: *const VcAnnotation,
    index: usize,
    kernel: VcKernel,
    sigma: f64,
    beta: f64,
    k: usize,
    out: *mut *mut VcDensityMap,
) -> VcStatus {
    guard(|| {
        let a = &handle(ann, "annotation")?.0;
        let frame = a
            .frames
            .get(index)
            .ok_or_else(|| Failure(VcStatus::InvalidArgument, format!("frame {index} out of range")))?;
        let spec = match kernel {
            VcKernel::Fixed => KernelSpec::fixed(sigma),
            VcKernel::Adaptive => KernelSpec::adaptive(beta, k),
        };
        emit(out, VcDensityMap(render_density(frame, &spec, a.width, a.height)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vc_density_load(path: *const c_char, out: *mut *mut VcDensityMap) -> VcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        emit(out, VcDensityMap(DensityMap::load(path)?))
    })
}

/// # Safety
/// `map` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vc_density_save(map: *const VcDensityMap, path: *const c_char) -> VcStatus {
    guard(|| {
        let m = handle(map, "density map")?;
        Ok(m.0.save(path_arg(path, "path")?)?)
    })
}

/// # Safety
/// `map` must be a live handle; `width` and `height` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_density_dims(map: *const VcDensityMap, width: *mut usize, height: *mut usize) -> VcStatus {
    guard(|| {
        let (w, h) = handle(map, "density map")?.0.dims();
        store(width, w)?;
        store(height, h)
    })
}

/// Count, i.e. the sum over the map.
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_density_count(map: *const VcDensityMap, out: *mut f64) -> VcStatus {
    guard(|| store(out, handle(map, "density map")?.0.sum()))
}

/// Copies the row-major values into `buf`, which must hold exactly
/// `width * height` doubles.
///
/// # Safety
/// `map` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn vc_density_copy(map: *const VcDensityMap, buf: *mut f64, len: usize) -> VcStatus {
    guard(|| {
        let values = handle(map, "density map")?.0.values();
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len != values.len() {
            return Err(Failure(
                VcStatus::Shape,
                format!("buffer holds {len} values, map has {}", values.len()),
            ));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vc_density_free(map: *mut VcDensityMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

// ------------------------------------------------------------ model

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vc_model_load(path: *const c_char, out: *mut *mut VcModel) -> VcStatus {
    guard(|| {
        let checkpoint = Checkpoint::load(path_arg(path, "path")?)?;
        let model = Model::new(checkpoint.config.clone())?;
        checkpoint.params.check_against(&model.config)?;
        emit(out, VcModel { model, checkpoint })
    })
}

/// Number of consecutive frames one prediction consumes.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_model_window(model: *const VcModel, out: *mut usize) -> VcStatus {
    guard(|| store(out, handle(model, "model")?.model.config.temporal_window))
}

/// Predicts the density of the last of `n_frames` PNG frames. `flow_path`
/// names a FLO2 file for the last frame pair; when null, flow is estimated
/// by block matching.
///
/// # Safety
/// `frame_paths` must point to `n_frames` NUL-terminated strings;
/// `flow_path` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_model_infer(
    model: *const VcModel,
    frame_paths: *const *const c_char,
    n_frames: usize,
    flow_path: *const c_char,
    out: *mut *mut VcDensityMap,
) -> VcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if frame_paths.is_null() {
            return Err(null("frame_paths"));
        }
        let window = m.model.config.temporal_window;
        if n_frames != window {
            return Err(Failure(
                VcStatus::Shape,
                format!("model expects {window} frames, got {n_frames}"),
            ));
        }
        let frames = std::slice::from_raw_parts(frame_paths, n_frames)
            .iter()
            .map(|&p| Ok(Image::load_png(path_arg(p, "frame path")?)?))
            .collect::<Result<Vec<_>, Failure>>()?;
        let spec = if flow_path.is_null() {
            FlowEstimatorSpec::default()
        } else {
            FlowEstimatorSpec::external(path_arg(flow_path, "flow_path")?)
        };
        let (prev, curr) = (frames[n_frames - 2].luma(), frames[n_frames - 1].luma());
        let flow = estimate_flow(&prev, &curr, &spec, None)?;
        let (density, _) = m.model.predict(&m.checkpoint.params, &frames, &flow)?;
        emit(out, VcDensityMap(density))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vc_model_free(model: *mut VcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ------------------------------------------------------------ metrics

/// MAE and root-mean-square error over `n` (predicted, true) count pairs.
///
/// # Safety
/// `pred` and `truth` must be valid for `n` reads; `mae` and `mse` writable.
#[no_mangle]
pub unsafe extern "C" fn vc_evaluate(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    mae: *mut f64,
    mse: *mut f64,
) -> VcStatus {
    guard(|| {
        if pred.is_null() || truth.is_null() {
            return Err(null("count array"));
        }
        let p = std::slice::from_raw_parts(pred, n);
        let t = std::slice::from_raw_parts(truth, n);
        let pairs: Vec<(f64, f64)> = p.iter().copied().zip(t.iter().copied()).collect();
        let report = evaluate(&pairs)?;
        store(mae, report.mae)?;
        store(mse, report.mse)
    })
}

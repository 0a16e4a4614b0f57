//! C interface to the `cdwqc` quality-control library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and released
//! with the matching `*_free` function. Every fallible function returns a
//! [`CdwqcStatus`]; on failure, [`cdwqc_last_error`] describes the most recent
//! error on the calling thread. Panics are caught and reported as
//! [`CdwqcStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cdwqc::dataset::ArtefactGrades;
use cdwqc::evaluate::{grades_to_tier, recombine_tier, SixWayPrediction};
use cdwqc::metrics::{average_edge_strength, tenengrad};
use cdwqc::model::{predict, Checkpoint, ModelError, Network};
use cdwqc::simulate::{Artefact, Severity, SeverityPreset};
use cdwqc::volume::{load_nifti, save_nifti, Volume3D, VolumeError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdwqcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidData = 4,
    ShapeMismatch = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdwqcArtefact {
    Motion = 0,
    Noise = 1,
    Contrast = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdwqcSeverity {
    Moderate = 1,
    Severe = 2,
}

/// Opaque 3D volume.
pub struct CdwqcVolume(Volume3D);

/// Opaque classifier restored from a checkpoint file.
pub struct CdwqcModel {
    net: Network<f32>,
    task: Option<CString>,
}

/// Outputs of the six artefact classifiers for one image.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CdwqcSixWay {
    pub motion_severe: bool,
    pub motion_moderate: bool,
    pub contrast_severe: bool,
    pub contrast_moderate: bool,
    pub noise_0vs12: bool,
    pub noise_0vs1: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    let c = CString::new(text).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CdwqcStatus, String);

impl Failure {
    fn new(status: CdwqcStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        let status = match e {
            VolumeError::NotFound(_) | VolumeError::Io { .. } | VolumeError::Write { .. } => {
                CdwqcStatus::Io
            }
            VolumeError::LengthMismatch { .. } | VolumeError::InvalidGeometry(_) => {
                CdwqcStatus::InvalidArgument
            }
            _ => CdwqcStatus::InvalidData,
        };
        Self(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::ShapeMismatch { .. } => CdwqcStatus::ShapeMismatch,
            ModelError::NonFiniteLoss { .. } => CdwqcStatus::Numeric,
            ModelError::Io { .. } => CdwqcStatus::Io,
            _ => CdwqcStatus::InvalidData,
        };
        Self(status, e.to_string())
    }
}

/// Runs `f`, converting failures and panics into a status plus thread-local message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CdwqcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CdwqcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CdwqcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(CdwqcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(CdwqcStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn volume_ref<'a>(v: *const CdwqcVolume) -> Result<&'a Volume3D, Failure> {
    v.as_ref().map(|v| &v.0).ok_or_else(|| null("volume"))
}

unsafe fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message describing the last failure on this thread, or NULL after a success.
///
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cdwqc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdwqc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a volume from `nx*ny*nz` doubles in x-fastest order with unit spacing.
///
/// # Safety
/// `data` must point to `len` readable doubles and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_volume_new(
    nx: usize,
    ny: usize,
    nz: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut CdwqcVolume,
) -> CdwqcStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let vol = Volume3D::from_data([nx, ny, nz], [1.0; 3], values)?;
        out_handle(out, CdwqcVolume(vol))
    })
}

/// Reads a NIfTI-1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_volume_load(
    path: *const c_char,
    out: *mut *mut CdwqcVolume,
) -> CdwqcStatus {
    guard(|| {
        let path = path_arg(path)?;
        out_handle(out, CdwqcVolume(load_nifti(path)?))
    })
}

/// Writes a volume as NIfTI-1 (float32 voxels).
///
/// # Safety
/// `vol` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_volume_save(
    vol: *const CdwqcVolume,
    path: *const c_char,
) -> CdwqcStatus {
    guard(|| {
        let vol = volume_ref(vol)?;
        save_nifti(vol, path_arg(path)?)?;
        Ok(())
    })
}

/// Writes the grid dimensions to `dims[0..3]`.
///
/// # Safety
/// `vol` must be a live handle and `dims` point to three writable values.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_volume_dims(
    vol: *const CdwqcVolume,
    dims: *mut usize,
) -> CdwqcStatus {
    guard(|| {
        let d = volume_ref(vol)?.dims();
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&d);
        Ok(())
    })
}

/// Copies the voxels into `buf`, which must hold exactly the voxel count.
///
/// # Safety
/// `vol` must be a live handle and `buf` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_volume_copy_data(
    vol: *const CdwqcVolume,
    buf: *mut f64,
    len: usize,
) -> CdwqcStatus {
    guard(|| {
        let vol = volume_ref(vol)?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len != vol.len() {
            return Err(Failure::new(
                CdwqcStatus::InvalidArgument,
                format!("buffer holds {len} values, volume has {}", vol.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(vol.data());
        Ok(())
    })
}

/// Releases a volume; NULL is ignored.
///
/// # Safety
/// `vol` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_volume_free(vol: *mut CdwqcVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Applies a severity preset, writing a new volume to `out`.
///
/// # Safety
/// `vol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_simulate_preset(
    vol: *const CdwqcVolume,
    artefact: CdwqcArtefact,
    severity: CdwqcSeverity,
    seed: u64,
    out: *mut *mut CdwqcVolume,
) -> CdwqcStatus {
    guard(|| {
        let vol = volume_ref(vol)?;
        let artefact = match artefact {
            CdwqcArtefact::Motion => Artefact::Motion,
            CdwqcArtefact::Noise => Artefact::Noise,
            CdwqcArtefact::Contrast => Artefact::Contrast,
        };
        let severity = match severity {
            CdwqcSeverity::Moderate => Severity::Moderate,
            CdwqcSeverity::Severe => Severity::Severe,
        };
        let (corrupted, _) = SeverityPreset::new(artefact, severity)
            .params(seed)
            .apply(vol);
        out_handle(out, CdwqcVolume(corrupted))
    })
}

/// Average edge strength of the volume.
///
/// # Safety
/// `vol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_metric_aes(vol: *const CdwqcVolume, out: *mut f64) -> CdwqcStatus {
    guard(|| {
        let v = average_edge_strength(volume_ref(vol)?)
            .map_err(|e| Failure::new(CdwqcStatus::InvalidData, e.to_string()))?;
        out.as_mut()
            .map(|o| *o = v)
            .ok_or_else(|| null("output pointer"))
    })
}

/// Tenengrad sharpness of the volume.
///
/// # Safety
/// `vol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_metric_tenengrad(
    vol: *const CdwqcVolume,
    out: *mut f64,
) -> CdwqcStatus {
    guard(|| {
        let v = tenengrad(volume_ref(vol)?);
        out.as_mut()
            .map(|o| *o = v)
            .ok_or_else(|| null("output pointer"))
    })
}

/// Restores a classifier from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_model_load(
    path: *const c_char,
    out: *mut *mut CdwqcModel,
) -> CdwqcStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        let task = ckpt
            .meta
            .task
            .as_deref()
            .map(|t| CString::new(t.replace('\0', " ")).expect("NULs removed"));
        out_handle(
            out,
            CdwqcModel {
                net: ckpt.network()?,
                task,
            },
        )
    })
}

/// Task name recorded in the checkpoint, or NULL if none.
///
/// # Safety
/// `model` must be a live handle; the string lives as long as the handle.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_model_task(model: *const CdwqcModel) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.task.as_ref())
        .map_or(ptr::null(), |t| t.as_ptr())
}

/// Probability of the positive class and the thresholded label for one volume.
///
/// # Safety
/// `model` and `vol` must be live handles; `probability` and `label` writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_model_predict(
    model: *const CdwqcModel,
    vol: *const CdwqcVolume,
    probability: *mut f64,
    label: *mut bool,
) -> CdwqcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let vol = volume_ref(vol)?;
        if probability.is_null() || label.is_null() {
            return Err(null("output pointer"));
        }
        let p = predict(&model.net, vol)?;
        *probability = p.probability;
        *label = p.label;
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_model_free(model: *mut CdwqcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Quality tier (1 good, 2 medium, 3 bad) for motion, noise and contrast grades in {0, 1, 2}.
///
/// # Safety
/// `tier` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_grades_to_tier(
    motion: u8,
    noise: u8,
    contrast: u8,
    tier: *mut u8,
) -> CdwqcStatus {
    guard(|| {
        let g = ArtefactGrades::new(motion, noise, contrast)
            .map_err(|e| Failure::new(CdwqcStatus::InvalidArgument, e.to_string()))?;
        tier.as_mut()
            .map(|t| *t = grades_to_tier(&g).value())
            .ok_or_else(|| null("output pointer"))
    })
}

/// Quality tier recombined from the six artefact classifier outputs.
///
/// # Safety
/// `flags` must point to a valid struct and `tier` be writable.
#[no_mangle]
pub unsafe extern "C" fn cdwqc_recombine_tier(
    flags: *const CdwqcSixWay,
    tier: *mut u8,
) -> CdwqcStatus {
    guard(|| {
        let f = flags.as_ref().ok_or_else(|| null("flags"))?;
        let p = SixWayPrediction {
            motion_severe: f.motion_severe,
            motion_moderate: f.motion_moderate,
            contrast_severe: f.contrast_severe,
            contrast_moderate: f.contrast_moderate,
            noise_0vs12: f.noise_0vs12,
            noise_0vs1: f.noise_0vs1,
        };
        tier.as_mut()
            .map(|t| *t = recombine_tier(&p).value())
            .ok_or_else(|| null("output pointer"))
    })
}

//! C ABI over the `aortaseg` library.
//!
//! Objects are opaque heap handles released with their `*_free` function.
//! Every fallible call returns an [`AsStatus`]; on failure a message for the
//! calling thread is available from [`as_last_error`]. Panics are caught at
//! the boundary and reported as `AS_ERR_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aortaseg::infer::{Ensemble, InferConfig};
use aortaseg::mesh::{marching_cubes, mesh_stats, save_mesh, MeshFormat, TriMesh};
use aortaseg::normalize::{softclip, softclip_rescale, zscore_normalize, PercentileBounds};
use aortaseg::{metrics, phantom, volume, Error, Volume, VolumeKind};

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsStatus {
    AS_OK = 0,
    AS_ERR_NULL = 1,
    AS_ERR_INVALID_ARGUMENT = 2,
    AS_ERR_SHAPE = 3,
    AS_ERR_IO = 4,
    AS_ERR_FORMAT = 5,
    AS_ERR_EMPTY_FOREGROUND = 6,
    AS_ERR_DEGENERATE_RANGE = 7,
    AS_ERR_CONFIG = 8,
    AS_ERR_TRAINING = 9,
    AS_ERR_CHECKPOINT = 10,
    AS_ERR_UTF8 = 11,
    AS_ERR_PANIC = 12,
}

pub use AsStatus::*;

/// `kind` argument meaning "take the kind stored in the file".
pub const AS_KIND_AUTO: i32 = -1;
pub const AS_KIND_IMAGE: i32 = 0;
pub const AS_KIND_LABEL: i32 = 1;

pub const AS_MESH_STL: i32 = 0;
pub const AS_MESH_OBJ: i32 = 1;

pub struct AsVolume {
    inner: Volume,
}

pub struct AsEnsemble {
    inner: Ensemble,
    cfg: InferConfig,
}

pub struct AsMesh {
    inner: TriMesh,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AsMeshStats {
    pub watertight: bool,
    pub euler: i64,
    pub volume: f64,
    pub area: f64,
    pub n_components: usize,
    pub n_vertices: usize,
    pub n_triangles: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AsStatus {
    match e {
        Error::InvalidArgument(_) => AS_ERR_INVALID_ARGUMENT,
        Error::Shape(_) => AS_ERR_SHAPE,
        Error::Io { .. } => AS_ERR_IO,
        Error::Format { .. } => AS_ERR_FORMAT,
        Error::EmptyForeground(_) => AS_ERR_EMPTY_FOREGROUND,
        Error::DegenerateRange(_) => AS_ERR_DEGENERATE_RANGE,
        Error::Config(_) => AS_ERR_CONFIG,
        Error::Training(_) => AS_ERR_TRAINING,
        Error::Checkpoint(_) => AS_ERR_CHECKPOINT,
    }
}

enum Fail {
    Null(&'static str),
    Utf8,
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AS_OK,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AS_ERR_NULL
        }
        Ok(Err(Fail::Utf8)) => {
            set_error("string argument is not valid UTF-8".into());
            AS_ERR_UTF8
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AS_ERR_PANIC
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| Fail::Utf8)
}

unsafe fn triple<T: Copy>(p: *const T, what: &'static str) -> Result<[T; 3], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok([*p, *p.add(1), *p.add(2)])
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn kind_of(k: i32) -> Result<Option<VolumeKind>, Fail> {
    match k {
        AS_KIND_AUTO => Ok(None),
        AS_KIND_IMAGE => Ok(Some(VolumeKind::Image)),
        AS_KIND_LABEL => Ok(Some(VolumeKind::Label)),
        _ => Err(Error::InvalidArgument(format!("unknown volume kind {k}")).into()),
    }
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn as_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn as_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn as_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// volumes

/// Copies `shape[0] * shape[1] * shape[2]` floats (z fastest) into a new
/// volume. `origin` may be null (zero origin).
#[no_mangle]
pub unsafe extern "C" fn as_volume_new(
    data: *const f32,
    shape: *const usize,
    spacing: *const f64,
    origin: *const f64,
    kind: i32,
    out: *mut *mut AsVolume,
) -> AsStatus {
    guard(|| {
        let shape = triple(shape, "shape")?;
        let spacing = triple(spacing, "spacing")?;
        let origin = if origin.is_null() { [0.0; 3] } else { triple(origin, "origin")? };
        let kind = kind_of(kind)?.unwrap_or(VolumeKind::Image);
        let n = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s));
        let n = n.ok_or_else(|| Error::InvalidArgument("shape overflows".into()))?;
        if data.is_null() && n > 0 {
            return Err(Fail::Null("data"));
        }
        let values = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(data, n).to_vec() };
        put(out, AsVolume { inner: Volume::new(values, shape, spacing, origin, kind)? })
    })
}

/// Loads a `.nii`, `.nii.gz` or `.vol` file. `kind` is one of the
/// `AS_KIND_*` constants.
#[no_mangle]
pub unsafe extern "C" fn as_volume_load(path: *const c_char, kind: i32, out: *mut *mut AsVolume) -> AsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let v = match kind_of(kind)? {
            Some(k) => volume::load_volume_as(&path, k)?,
            None => volume::load_volume(&path)?,
        };
        put(out, AsVolume { inner: v })
    })
}

#[no_mangle]
pub unsafe extern "C" fn as_volume_save(vol: *const AsVolume, path: *const c_char) -> AsStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        let path = path_arg(path, "path")?;
        volume::save_volume(&v.inner, &path)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn as_volume_free(vol: *mut AsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Writes shape (3 values), spacing and origin (3 values each); any output
/// pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn as_volume_geometry(
    vol: *const AsVolume,
    shape: *mut usize,
    spacing: *mut f64,
    origin: *mut f64,
) -> AsStatus {
    guard(|| {
        let v = &deref(vol, "vol")?.inner;
        for a in 0..3 {
            if !shape.is_null() {
                *shape.add(a) = v.shape()[a];
            }
            if !spacing.is_null() {
                *spacing.add(a) = v.spacing()[a];
            }
            if !origin.is_null() {
                *origin.add(a) = v.origin()[a];
            }
        }
        Ok(())
    })
}

/// Number of voxels, 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn as_volume_len(vol: *const AsVolume) -> usize {
    vol.as_ref().map_or(0, |v| v.inner.len())
}

/// Borrowed pointer to the voxel data (z fastest), valid while the handle
/// lives; null for a null handle.
#[no_mangle]
pub unsafe extern "C" fn as_volume_data(vol: *const AsVolume) -> *const f32 {
    vol.as_ref().map_or(ptr::null(), |v| v.inner.data().as_ptr())
}

/// `AS_KIND_IMAGE` or `AS_KIND_LABEL`; -1 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn as_volume_kind(vol: *const AsVolume) -> i32 {
    match vol.as_ref().map(|v| v.inner.kind()) {
        Some(VolumeKind::Image) => AS_KIND_IMAGE,
        Some(VolumeKind::Label) => AS_KIND_LABEL,
        None => -1,
    }
}

/// Trilinear (images) or nearest (labels) resampling to `target_spacing`.
#[no_mangle]
pub unsafe extern "C" fn as_resample(vol: *const AsVolume, target_spacing: *const f64, out: *mut *mut AsVolume) -> AsStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        let t = triple(target_spacing, "target_spacing")?;
        put(out, AsVolume { inner: volume::resample(&v.inner, t)? })
    })
}

// ---------------------------------------------------------------------------
// normalization

/// Z-score normalization; `degenerate` (nullable) is set for constant input.
#[no_mangle]
pub unsafe extern "C" fn as_zscore(vol: *const AsVolume, out: *mut *mut AsVolume, degenerate: *mut bool) -> AsStatus {
    guard(|| {
        let z = zscore_normalize(&deref(vol, "vol")?.inner)?;
        if !degenerate.is_null() {
            *degenerate = z.degenerate;
        }
        put(out, AsVolume { inner: z.volume })
    })
}

#[no_mangle]
pub extern "C" fn as_softclip(v: f64, k: f64) -> f64 {
    softclip(v, k)
}

/// Soft-clip rescale of `vol` to the intensity window `[lo, hi]`.
#[no_mangle]
pub unsafe extern "C" fn as_softclip_rescale(vol: *const AsVolume, lo: f64, hi: f64, k: f64, out: *mut *mut AsVolume) -> AsStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        let b = PercentileBounds::new(lo, hi)?;
        put(out, AsVolume { inner: softclip_rescale(&v.inner, b, k)? })
    })
}

// ---------------------------------------------------------------------------
// metrics

#[no_mangle]
pub unsafe extern "C" fn as_dice(pred: *const AsVolume, gt: *const AsVolume, out: *mut f64) -> AsStatus {
    guard(|| {
        let d = metrics::dice_score(&deref(pred, "pred")?.inner, &deref(gt, "gt")?.inner)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = d;
        Ok(())
    })
}

/// HD95 in millimetres using the ground truth's spacing; `INFINITY` when
/// exactly one mask is empty.
#[no_mangle]
pub unsafe extern "C" fn as_hd95(pred: *const AsVolume, gt: *const AsVolume, out: *mut f64) -> AsStatus {
    guard(|| {
        let g = &deref(gt, "gt")?.inner;
        let h = metrics::hd95(&deref(pred, "pred")?.inner, g, g.spacing())?;
        *out.as_mut().ok_or(Fail::Null("out"))? = h;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn as_largest_component(mask: *const AsVolume, out: *mut *mut AsVolume) -> AsStatus {
    guard(|| {
        let m = metrics::largest_component(&deref(mask, "mask")?.inner)?;
        put(out, AsVolume { inner: m })
    })
}

// ---------------------------------------------------------------------------
// phantoms

/// Case `index` of the phantom dataset generated from `seed`.
#[no_mangle]
pub unsafe extern "C" fn as_phantom_case(
    shape: *const usize,
    seed: u64,
    index: usize,
    offset: bool,
    image: *mut *mut AsVolume,
    label: *mut *mut AsVolume,
) -> AsStatus {
    guard(|| {
        if image.is_null() || label.is_null() {
            return Err(Fail::Null("image/label"));
        }
        let c = phantom::dataset_case(triple(shape, "shape")?, seed, index, offset)?;
        put(image, AsVolume { inner: c.image })?;
        put(label, AsVolume { inner: c.label })
    })
}

// ---------------------------------------------------------------------------
// ensemble inference

/// Loads every `fold<F>_rep<R>/best.ckpt` under `ckpt_dir` with default
/// inference settings; `stage1_count` 0 keeps the default (5).
#[no_mangle]
pub unsafe extern "C" fn as_ensemble_load(
    ckpt_dir: *const c_char,
    stage1_count: usize,
    paper_literal: bool,
    out: *mut *mut AsEnsemble,
) -> AsStatus {
    guard(|| {
        let dir = path_arg(ckpt_dir, "ckpt_dir")?;
        let mut cfg = InferConfig { paper_literal, ..InferConfig::default() };
        if stage1_count > 0 {
            cfg.stage1_count = stage1_count;
        }
        let inner = Ensemble::load(&dir, &cfg)?;
        put(out, AsEnsemble { inner, cfg })
    })
}

/// Number of (stage-1, stage-2) models.
#[no_mangle]
pub unsafe extern "C" fn as_ensemble_size(ens: *const AsEnsemble, stage1: *mut usize, stage2: *mut usize) -> AsStatus {
    guard(|| {
        let e = deref(ens, "ens")?;
        if !stage1.is_null() {
            *stage1 = e.inner.stage1.len();
        }
        if !stage2.is_null() {
            *stage2 = e.inner.stage2.len();
        }
        Ok(())
    })
}

/// Two-stage prediction of a raw image. `report_json` (nullable) receives a
/// JSON report to be freed with `as_string_free`.
#[no_mangle]
pub unsafe extern "C" fn as_ensemble_predict(
    ens: *const AsEnsemble,
    raw: *const AsVolume,
    mask: *mut *mut AsVolume,
    report_json: *mut *mut c_char,
) -> AsStatus {
    guard(|| {
        let e = deref(ens, "ens")?;
        let raw = deref(raw, "raw")?;
        if mask.is_null() {
            return Err(Fail::Null("mask"));
        }
        let (m, report) = e.inner.predict(&raw.inner, &e.cfg)?;
        if !report_json.is_null() {
            let s = serde_json::to_string(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            *report_json = CString::new(s).unwrap_or_default().into_raw();
        }
        put(mask, AsVolume { inner: m })
    })
}

#[no_mangle]
pub unsafe extern "C" fn as_ensemble_free(ens: *mut AsEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

// ---------------------------------------------------------------------------
// meshes

#[no_mangle]
pub unsafe extern "C" fn as_mesh_from_mask(mask: *const AsVolume, smooth_iters: usize, out: *mut *mut AsMesh) -> AsStatus {
    guard(|| {
        let m = marching_cubes(&deref(mask, "mask")?.inner, smooth_iters)?;
        put(out, AsMesh { inner: m })
    })
}

#[no_mangle]
pub unsafe extern "C" fn as_mesh_stats(mesh: *const AsMesh, out: *mut AsMeshStats) -> AsStatus {
    guard(|| {
        let s = mesh_stats(&deref(mesh, "mesh")?.inner);
        *out.as_mut().ok_or(Fail::Null("out"))? = AsMeshStats {
            watertight: s.watertight,
            euler: s.euler,
            volume: s.volume,
            area: s.area,
            n_components: s.n_components,
            n_vertices: s.n_vertices,
            n_triangles: s.n_triangles,
        };
        Ok(())
    })
}

/// `format` is `AS_MESH_STL` or `AS_MESH_OBJ`.
#[no_mangle]
pub unsafe extern "C" fn as_mesh_save(mesh: *const AsMesh, path: *const c_char, format: i32) -> AsStatus {
    guard(|| {
        let m = deref(mesh, "mesh")?;
        let path = path_arg(path, "path")?;
        let f = match format {
            AS_MESH_STL => MeshFormat::StlBinary,
            AS_MESH_OBJ => MeshFormat::Obj,
            _ => return Err(Error::InvalidArgument(format!("unknown mesh format {format}")).into()),
        };
        save_mesh(&m.inner, &path, f)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn as_mesh_free(mesh: *mut AsMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

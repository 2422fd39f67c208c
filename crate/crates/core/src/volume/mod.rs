//! Volumetric data model and spacing-aware resampling.
//!
//! Voxel data is stored row-major over `(x, y, z)`: `z` varies fastest and
//! the linear index of `(x, y, z)` is `(x * ny + y) * nz + z`.

mod io;

pub use io::{load_volume, load_volume_as, save_volume};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
}

impl VolumeKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            VolumeKind::Image => 0,
            VolumeKind::Label => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(VolumeKind::Image),
            1 => Some(VolumeKind::Label),
            _ => None,
        }
    }
}

/// A 3D scalar grid with physical spacing and origin (millimetres).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: VolumeKind,
}

pub(crate) fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spacing components must be strictly positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(
        data: Vec<f32>,
        shape: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
    ) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("every dimension must be >= 1, got {shape:?}")));
        }
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape:?} ({n} voxels)",
                data.len()
            )));
        }
        validate_spacing(spacing)?;
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("origin must be finite, got {origin:?}")));
        }
        if kind == VolumeKind::Label {
            if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "label volume contains non-class value {bad}"
                )));
            }
        }
        Ok(Self {
            data,
            shape,
            spacing,
            origin,
            kind,
        })
    }

    pub fn filled(value: f32, shape: [usize; 3], spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape, spacing, [0.0; 3], kind)
    }

    /// A new volume with the same geometry and kind but different data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(data, self.shape, self.spacing, self.origin, self.kind)
    }

    /// Same geometry, different kind.
    pub fn with_data_kind(&self, data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        Self::new(data, self.shape, self.spacing, self.origin, kind)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Sorted distinct values (intended for label volumes).
    pub fn distinct_values(&self) -> Vec<f32> {
        let mut v = self.data.clone();
        v.sort_by(f32::total_cmp);
        v.dedup();
        v
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }
}

pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Output grid shape when resampling `shape` from `spacing` to `target`.
pub fn resampled_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [1usize; 3];
    for a in 0..3 {
        let n = round_half_up(shape[a] as f64 * spacing[a] / target[a]);
        out[a] = (n as usize).max(1);
    }
    out
}

/// Resamples onto a grid with `target_spacing`, keeping the origin.
///
/// Output voxel `j` along axis `a` samples input coordinate
/// `j * target[a] / spacing[a]`. Images use trilinear interpolation and labels
/// nearest-neighbour (half-up); samples outside the grid clamp to the edge.
pub fn resample(vol: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    validate_spacing(target_spacing)?;
    if target_spacing == vol.spacing {
        return Ok(vol.clone());
    }
    let out_shape = resampled_shape(vol.shape, vol.spacing, target_spacing);
    let ratio: [f64; 3] = std::array::from_fn(|a| target_spacing[a] / vol.spacing[a]);
    let data = match vol.kind {
        VolumeKind::Image => sample_grid(vol, out_shape, |o| {
            std::array::from_fn(|a| o[a] as f64 * ratio[a])
        }, Interp::Linear),
        VolumeKind::Label => sample_grid(vol, out_shape, |o| {
            std::array::from_fn(|a| o[a] as f64 * ratio[a])
        }, Interp::Nearest),
    };
    Volume::new(data, out_shape, target_spacing, vol.origin, vol.kind)
}

/// Resamples a volume onto exactly `shape` with `spacing`, used to map a
/// prediction back onto the original acquisition grid.
pub fn resample_to_grid(vol: &Volume, shape: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    validate_spacing(spacing)?;
    if shape == vol.shape && spacing == vol.spacing {
        return Ok(vol.clone());
    }
    let ratio: [f64; 3] = std::array::from_fn(|a| spacing[a] / vol.spacing[a]);
    let interp = match vol.kind {
        VolumeKind::Image => Interp::Linear,
        VolumeKind::Label => Interp::Nearest,
    };
    let data = sample_grid(vol, shape, |o| std::array::from_fn(|a| o[a] as f64 * ratio[a]), interp);
    Volume::new(data, shape, spacing, vol.origin, vol.kind)
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Interp {
    Linear,
    Nearest,
}

/// Fills an `out_shape` grid by sampling `vol` at the continuous voxel
/// coordinates produced by `coord`.
pub(crate) fn sample_grid<F>(vol: &Volume, out_shape: [usize; 3], coord: F, interp: Interp) -> Vec<f32>
where
    F: Fn([usize; 3]) -> [f64; 3],
{
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for x in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for z in 0..out_shape[2] {
                let c = coord([x, y, z]);
                out.push(match interp {
                    Interp::Linear => trilinear(vol, c),
                    Interp::Nearest => nearest(vol, c),
                });
            }
        }
    }
    out
}

#[inline]
pub(crate) fn nearest(vol: &Volume, c: [f64; 3]) -> f32 {
    let idx: [usize; 3] = std::array::from_fn(|a| {
        let max = (vol.shape[a] - 1) as f64;
        round_half_up(c[a]).clamp(0.0, max) as usize
    });
    vol.get(idx[0], idx[1], idx[2])
}

/// Trilinear interpolation with edge clamping.
#[inline]
pub(crate) fn trilinear(vol: &Volume, c: [f64; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let max = (vol.shape[a] - 1) as f64;
        let ca = c[a].clamp(0.0, max);
        let f = ca.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(vol.shape[a] - 1);
        t[a] = ca - f;
    }
    let v = |x: usize, y: usize, z: usize| vol.get(x, y, z) as f64;
    let c00 = v(i0[0], i0[1], i0[2]) * (1.0 - t[2]) + v(i0[0], i0[1], i1[2]) * t[2];
    let c01 = v(i0[0], i1[1], i0[2]) * (1.0 - t[2]) + v(i0[0], i1[1], i1[2]) * t[2];
    let c10 = v(i1[0], i0[1], i0[2]) * (1.0 - t[2]) + v(i1[0], i0[1], i1[2]) * t[2];
    let c11 = v(i1[0], i1[1], i0[2]) * (1.0 - t[2]) + v(i1[0], i1[1], i1[2]) * t[2];
    let c0 = c00 * (1.0 - t[1]) + c01 * t[1];
    let c1 = c10 * (1.0 - t[1]) + c11 * t[1];
    (c0 * (1.0 - t[0]) + c1 * t[0]) as f32
}

//! Volume containers: NIfTI-1 (`.nii`, `.nii.gz`) restricted to axis-aligned
//! affines, and a plain little-endian binary container (`.vol`).
//!
//! Plain container layout:
//!
//! ```text
//! u32 x3   shape (x, y, z)
//! f64 x3   spacing (mm)
//! f64 x3   origin (mm)
//! u8       kind (0 = image, 1 = label)
//! f32 x N  data, row-major with z fastest
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use nifti::writer::WriterOptions;

use super::{Volume, VolumeKind};
use crate::error::{Error, Result};

/// NIFTI_INTENT_LABEL
const INTENT_LABEL: i16 = 1002;
/// NIFTI_UNITS_MM
const UNITS_MM: u8 = 2;

enum Container {
    Nifti,
    Plain,
}

fn container_for(path: &Path) -> Result<Container> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Container::Nifti)
    } else if name.ends_with(".vol") {
        Ok(Container::Plain)
    } else {
        Err(Error::InvalidArgument(format!(
            "unrecognized volume extension for {} (expected .nii, .nii.gz or .vol)",
            path.display()
        )))
    }
}

/// Loads a volume. The kind comes from the file: the plain container stores
/// it, NIfTI files are labels when their intent code is NIFTI_INTENT_LABEL.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match container_for(path)? {
        Container::Nifti => load_nifti(path, None),
        Container::Plain => load_plain(path),
    }
}

/// Loads a volume and reinterprets it as `kind` (e.g. a ground-truth mask
/// written by a third-party tool without a label intent).
pub fn load_volume_as(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume> {
    let path = path.as_ref();
    let vol = match container_for(path)? {
        Container::Nifti => load_nifti(path, Some(kind))?,
        Container::Plain => load_plain(path)?,
    };
    if vol.kind() == kind {
        return Ok(vol);
    }
    let (shape, spacing, origin) = (vol.shape(), vol.spacing(), vol.origin());
    Volume::new(vol.into_data(), shape, spacing, origin, kind)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match container_for(path)? {
        Container::Nifti => save_nifti(vol, path),
        Container::Plain => save_plain(vol, path),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn load_plain(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(open(path)?);
    let malformed = |e: std::io::Error| Error::format(path, format!("truncated header or data: {e}"));
    let mut shape = [0usize; 3];
    for s in &mut shape {
        *s = r.read_u32::<LittleEndian>().map_err(malformed)? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = r.read_f64::<LittleEndian>().map_err(malformed)?;
    }
    let mut origin = [0f64; 3];
    for o in &mut origin {
        *o = r.read_f64::<LittleEndian>().map_err(malformed)?;
    }
    let kind_code = r.read_u8().map_err(malformed)?;
    let kind = VolumeKind::from_code(kind_code)
        .ok_or_else(|| Error::format(path, format!("unknown kind byte {kind_code}")))?;
    let n = shape.iter().product::<usize>();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(malformed)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after voxel data"));
    }
    Volume::new(data, shape, spacing, origin, kind).map_err(|e| Error::format(path, e.to_string()))
}

fn save_plain(vol: &Volume, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    for &s in &vol.shape() {
        let s = u32::try_from(s).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
        w.write_u32::<LittleEndian>(s).map_err(io)?;
    }
    for &s in &vol.spacing() {
        w.write_f64::<LittleEndian>(s).map_err(io)?;
    }
    for &o in &vol.origin() {
        w.write_f64::<LittleEndian>(o).map_err(io)?;
    }
    w.write_u8(vol.kind().code()).map_err(io)?;
    for &v in vol.data() {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn load_nifti(path: &Path, kind_hint: Option<VolumeKind>) -> Result<Volume> {
    // Surface missing files as I/O errors rather than format errors.
    open(path)?;
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let header: NiftiHeader = obj.header().clone();
    let ndim = header.dim[0] as usize;
    let extra_ok = (4..=ndim.min(7)).all(|d| header.dim[d] <= 1);
    if !(1..=7).contains(&ndim) || (ndim > 3 && !extra_ok) {
        return Err(Error::format(path, format!("expected a 3D volume, dim = {:?}", header.dim)));
    }
    let shape: [usize; 3] = std::array::from_fn(|a| {
        if a < ndim {
            header.dim[a + 1] as usize
        } else {
            1
        }
    });
    let spacing: [f64; 3] = std::array::from_fn(|a| header.pixdim[a + 1] as f64);
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::format(
            path,
            format!("pixdim spacing missing or non-positive: {spacing:?}"),
        ));
    }
    let origin = if header.sform_code > 0 {
        let rows = [header.srow_x, header.srow_y, header.srow_z];
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().take(3).enumerate() {
                if r != c && (*v as f64).abs() > 1e-6 * spacing[r].max(spacing[c]) {
                    return Err(Error::format(path, "oblique affines are not supported"));
                }
            }
        }
        [rows[0][3] as f64, rows[1][3] as f64, rows[2][3] as f64]
    } else {
        [header.quatern_x as f64, header.quatern_y as f64, header.quatern_z as f64]
    };
    let kind = kind_hint.unwrap_or(if header.intent_code == INTENT_LABEL {
        VolumeKind::Label
    } else {
        VolumeKind::Image
    });
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if arr.len() != shape.iter().product::<usize>() {
        return Err(Error::format(path, "voxel count does not match header dims"));
    }
    let arr = arr
        .into_shape(ndarray::IxDyn(&shape))
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut data = Vec::with_capacity(arr.len());
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                data.push(arr[[x, y, z]]);
            }
        }
    }
    Volume::new(data, shape, spacing, origin, kind).map_err(|e| Error::format(path, e.to_string()))
}

fn save_nifti(vol: &Volume, path: &Path) -> Result<()> {
    let [sx, sy, sz] = vol.spacing();
    let [ox, oy, oz] = vol.origin();
    let mut header = NiftiHeader {
        pixdim: [1.0, sx as f32, sy as f32, sz as f32, 1.0, 1.0, 1.0, 1.0],
        xyzt_units: UNITS_MM,
        qform_code: 1,
        sform_code: 1,
        quatern_x: ox as f32,
        quatern_y: oy as f32,
        quatern_z: oz as f32,
        srow_x: [sx as f32, 0.0, 0.0, ox as f32],
        srow_y: [0.0, sy as f32, 0.0, oy as f32],
        srow_z: [0.0, 0.0, sz as f32, oz as f32],
        ..NiftiHeader::default()
    };
    let shape = vol.shape();
    let res = match vol.kind() {
        VolumeKind::Image => {
            let arr = ndarray::Array3::from_shape_vec(shape, vol.data().to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?;
            WriterOptions::new(path).reference_header(&header).write_nifti(&arr)
        }
        VolumeKind::Label => {
            header.intent_code = INTENT_LABEL;
            let max = vol.data().iter().fold(0f32, |m, v| m.max(*v));
            if max <= u8::MAX as f32 {
                let arr = ndarray::Array3::from_shape_vec(shape, vol.data().iter().map(|v| *v as u8).collect())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                WriterOptions::new(path).reference_header(&header).write_nifti(&arr)
            } else {
                let arr = ndarray::Array3::from_shape_vec(shape, vol.data().iter().map(|v| *v as i32).collect())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                WriterOptions::new(path).reference_header(&header).write_nifti(&arr)
            }
        }
    };
    res.map_err(|e| match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: VolumeKind) -> Volume {
        let data: Vec<f32> = (0..60)
            .map(|i| match kind {
                VolumeKind::Image => i as f32 * 0.37 - 5.0,
                VolumeKind::Label => (i % 2) as f32,
            })
            .collect();
        Volume::new(data, [3, 4, 5], [0.5, 0.75, 1.25], [-12.25, 3.5, 100.0], kind).unwrap()
    }

    #[test]
    fn plain_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [VolumeKind::Image, VolumeKind::Label] {
            let v = sample(kind);
            let p = dir.path().join("a.vol");
            save_volume(&v, &p).unwrap();
            assert_eq!(load_volume(&p).unwrap(), v);
        }
    }

    #[test]
    fn nifti_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "b.nii.gz"] {
            for kind in [VolumeKind::Image, VolumeKind::Label] {
                let v = sample(kind);
                let p = dir.path().join(name);
                save_volume(&v, &p).unwrap();
                let back = load_volume(&p).unwrap();
                assert_eq!(back.kind(), kind);
                assert_eq!(back.shape(), v.shape());
                assert_eq!(back.data(), v.data());
                for a in 0..3 {
                    assert!((back.spacing()[a] - v.spacing()[a]).abs() < 1e-6);
                    assert!((back.origin()[a] - v.origin()[a]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn label_nifti_stored_as_integers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.nii");
        save_volume(&sample(VolumeKind::Label), &p).unwrap();
        let h = NiftiHeader::from_file(&p).unwrap();
        assert_eq!(h.datatype, nifti::NiftiType::Uint8 as i16);
        assert_eq!(h.intent_code, INTENT_LABEL);
    }

    #[test]
    fn zero_spacing_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.vol");
        save_volume(&sample(VolumeKind::Image), &p).unwrap();
        // overwrite the first spacing component (bytes 12..20) with 0.0
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[12..20].copy_from_slice(&0f64.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));

        let p = dir.path().join("z.nii");
        save_volume(&sample(VolumeKind::Image), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // pixdim[1] lives at byte offset 80
        bytes[80..84].copy_from_slice(&0f32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_volume(dir.path().join("nope.vol")), Err(Error::Io { .. })));
        assert!(matches!(load_volume(dir.path().join("nope.nii")), Err(Error::Io { .. })));
        let p = dir.path().join("t.vol");
        std::fs::write(&p, [1u8, 0, 0]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
        assert!(load_volume(dir.path().join("x.txt")).is_err());
    }
}

//! Synthetic CT-like vessel phantoms with exact ground truth.
//!
//! The vessel is a tube running along z whose centreline bends sinusoidally in
//! x and whose radius tapers linearly with z, optionally with a straight side
//! branch. A voxel is labelled foreground when its in-plane distance (voxel
//! units) to the centreline is below the local radius, or when it lies within
//! the branch radius of the branch segment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{make_folds, Datalist, DatalistEntry};
use crate::volume::{save_volume, Volume, VolumeKind};

const MARGIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// z index where the branch leaves the centreline.
    pub z0: f64,
    /// Direction (voxel units, need not be normalized).
    pub direction: [f64; 3],
    pub length: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Centreline position at the bottom of the volume (voxels).
    pub center: [f64; 2],
    pub amplitude: f64,
    /// Bend period along z (voxels).
    pub period: f64,
    pub phase: f64,
    /// Radius at the first and last vessel slice (voxels).
    pub radius: (f64, f64),
    pub branch: Option<Branch>,
    pub background: (f64, f64),
    pub vessel: (f64, f64),
    pub intensity_scale: f32,
    pub intensity_offset: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing: [0.7, 0.7, 1.0],
            center: [32.0, 32.0],
            amplitude: 4.0,
            period: 64.0,
            phase: 0.0,
            radius: (6.0, 3.0),
            branch: None,
            background: (40.0, 15.0),
            vessel: (300.0, 20.0),
            intensity_scale: 1.0,
            intensity_offset: 0.0,
        }
    }
}

impl PhantomSpec {
    /// First and last z slice containing vessel.
    pub fn z_range(&self) -> (usize, usize) {
        (MARGIN as usize, self.shape[2] - 1 - MARGIN as usize)
    }

    pub fn centerline(&self, z: f64) -> [f64; 2] {
        let x = self.center[0] + self.amplitude * (2.0 * std::f64::consts::PI * z / self.period + self.phase).sin();
        [x, self.center[1]]
    }

    pub fn radius_at(&self, z: f64) -> f64 {
        let (z0, z1) = self.z_range();
        let t = ((z - z0 as f64) / (z1 - z0).max(1) as f64).clamp(0.0, 1.0);
        self.radius.0 + (self.radius.1 - self.radius.0) * t
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("phantom: {m}")));
        if self.shape.iter().any(|&n| n < 2 * MARGIN as usize + 2) {
            return bad(format!("shape {:?} too small", self.shape));
        }
        if self.radius.0 <= 0.0 || self.radius.1 <= 0.0 || !(self.period > 0.0) {
            return bad("radii and period must be positive".into());
        }
        if !(self.background.1 >= 0.0 && self.vessel.1 >= 0.0) {
            return bad("intensity standard deviations must be non-negative".into());
        }
        let rmax = self.radius.0.max(self.radius.1);
        let [nx, ny, _] = self.shape;
        let lo_x = self.center[0] - self.amplitude.abs() - rmax;
        let hi_x = self.center[0] + self.amplitude.abs() + rmax;
        let lo_y = self.center[1] - rmax;
        let hi_y = self.center[1] + rmax;
        if lo_x < MARGIN || lo_y < MARGIN || hi_x > nx as f64 - 1.0 - MARGIN || hi_y > ny as f64 - 1.0 - MARGIN {
            return Err(Error::InvalidArgument(format!(
                "phantom: vessel out of bounds (x {lo_x:.1}..{hi_x:.1}, y {lo_y:.1}..{hi_y:.1}, shape {:?})",
                self.shape
            )));
        }
        if let Some(b) = &self.branch {
            if b.radius <= 0.0 || b.length <= 0.0 {
                return bad("branch radius and length must be positive".into());
            }
            let (a, e) = self.branch_segment(b);
            for p in [a, e] {
                for k in 0..3 {
                    if p[k] - b.radius < MARGIN || p[k] + b.radius > self.shape[k] as f64 - 1.0 - MARGIN {
                        return bad("branch out of bounds".into());
                    }
                }
            }
        }
        Ok(())
    }

    fn branch_segment(&self, b: &Branch) -> ([f64; 3], [f64; 3]) {
        let c = self.centerline(b.z0);
        let start = [c[0], c[1], b.z0];
        let n = (b.direction.iter().map(|d| d * d).sum::<f64>()).sqrt().max(1e-12);
        let end = [
            start[0] + b.direction[0] / n * b.length,
            start[1] + b.direction[1] / n * b.length,
            start[2] + b.direction[2] / n * b.length,
        ];
        (start, end)
    }

    /// Ground-truth membership of voxel `(x, y, z)`.
    pub fn inside(&self, x: usize, y: usize, z: usize) -> bool {
        let (z0, z1) = self.z_range();
        if z >= z0 && z <= z1 {
            let c = self.centerline(z as f64);
            let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
            if (dx * dx + dy * dy).sqrt() < self.radius_at(z as f64) {
                return true;
            }
        }
        if let Some(b) = &self.branch {
            let (a, e) = self.branch_segment(b);
            let p = [x as f64, y as f64, z as f64];
            let d = [e[0] - a[0], e[1] - a[1], e[2] - a[2]];
            let dd: f64 = d.iter().map(|v| v * v).sum();
            let t = ((0..3).map(|k| (p[k] - a[k]) * d[k]).sum::<f64>() / dd).clamp(0.0, 1.0);
            let dist2: f64 = (0..3).map(|k| (p[k] - a[k] - t * d[k]).powi(2)).sum();
            if dist2.sqrt() < b.radius {
                return true;
            }
        }
        false
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub image: Volume,
    pub label: Volume,
}

/// Renders one case; all randomness (intensity noise) comes from `rng`.
pub fn generate_case<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Result<PhantomCase> {
    spec.validate()?;
    let [nx, ny, nz] = spec.shape;
    let mut label = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                label.push(if spec.inside(x, y, z) { 1.0f32 } else { 0.0 });
            }
        }
    }
    let bg = Normal::new(spec.background.0, spec.background.1).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let fg = Normal::new(spec.vessel.0, spec.vessel.1).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let image: Vec<f32> = label
        .iter()
        .map(|l| {
            let v = if *l > 0.0 { fg.sample(rng) } else { bg.sample(rng) } as f32;
            v * spec.intensity_scale + spec.intensity_offset
        })
        .collect();
    Ok(PhantomCase {
        image: Volume::new(image, spec.shape, spec.spacing, [0.0; 3], VolumeKind::Image)?,
        label: Volume::new(label, spec.shape, spec.spacing, [0.0; 3], VolumeKind::Label)?,
    })
}

/// Random per-case geometry around the default spec, scaled to `shape`.
pub fn jittered_spec<R: Rng>(shape: [usize; 3], rng: &mut R) -> PhantomSpec {
    let [nx, ny, nz] = shape.map(|n| n as f64);
    let s = (nx.min(ny) / 64.0).min(1.0);
    let r0 = rng.random_range(5.0..7.0) * s;
    let r1 = rng.random_range(2.5..3.5) * s;
    let amp = rng.random_range(0.0..6.0) * s;
    let center = [
        (nx - 1.0) / 2.0 + rng.random_range(-3.0..3.0) * s,
        (ny - 1.0) / 2.0 + rng.random_range(-3.0..3.0) * s,
    ];
    let period = rng.random_range(1.0..2.0) * nz;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let branch = if rng.random_bool(0.5) {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Some(Branch {
            z0: rng.random_range(0.3..0.6) * nz,
            direction: [0.0, sign, 0.6],
            length: rng.random_range(8.0..12.0) * s,
            radius: rng.random_range(2.0..2.5) * s.max(0.75),
        })
    } else {
        None
    };
    PhantomSpec {
        shape,
        center,
        amplitude: amp,
        period,
        phase,
        radius: (r0, r1),
        branch,
        ..PhantomSpec::default()
    }
}

/// Options for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub shape: [usize; 3],
    pub folds: usize,
    /// Fraction of cases stored with a +1024 intensity offset.
    pub offset_fraction: f64,
    /// File extension for volumes, e.g. `nii.gz` or `vol`.
    pub extension: String,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            folds: 5,
            offset_fraction: 0.0,
            extension: "nii.gz".into(),
        }
    }
}

pub const POSITIVE_OFFSET: f32 = 1024.0;

/// Case `index` of the dataset generated from `seed`, optionally stored with
/// the +1024 offset.
pub fn dataset_case(shape: [usize; 3], seed: u64, index: usize, offset: bool) -> Result<PhantomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let mut spec = jittered_spec(shape, &mut rng);
    if offset {
        spec.intensity_offset = POSITIVE_OFFSET;
    }
    generate_case(&spec, &mut rng)
}

/// Writes `n_cases` image/label pairs and `dataset.json` into `out_dir`.
/// Paths in the datalist are relative to `out_dir`.
pub fn generate_dataset(n_cases: usize, out_dir: &Path, seed: u64, opts: &DatasetOptions) -> Result<Datalist> {
    if n_cases == 0 {
        return Err(Error::InvalidArgument("n_cases must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.offset_fraction) {
        return Err(Error::InvalidArgument("offset_fraction must be in [0, 1]".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n_offset = (opts.offset_fraction * n_cases as f64).round() as usize;
    let mut ids = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let case = dataset_case(opts.shape, seed, i, i < n_offset)?;
        let id = format!("case_{i:03}");
        save_volume(&case.image, &out_dir.join(format!("{id}_image.{}", opts.extension)))?;
        save_volume(&case.label, &out_dir.join(format!("{id}_label.{}", opts.extension)))?;
        ids.push(id);
    }
    let folds = make_folds(&ids, opts.folds.min(n_cases), seed)?;
    let list = Datalist {
        training: ids
            .iter()
            .zip(folds)
            .map(|(id, fold)| DatalistEntry {
                image: format!("{id}_image.{}", opts.extension),
                label: format!("{id}_label.{}", opts.extension),
                fold,
            })
            .collect(),
    };
    list.save(&out_dir.join("dataset.json"))?;
    Ok(list)
}

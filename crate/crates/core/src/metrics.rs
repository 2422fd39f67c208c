//! Overlap and surface-distance metrics on binary masks, plus connected
//! component filtering.
//!
//! Any nonzero voxel counts as foreground.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{Volume, VolumeKind};

fn check_grid(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.spacing() != b.spacing() {
        return Err(Error::InvalidArgument(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    Ok(())
}

/// `2|P & G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_grid(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (*p != 0.0, *g != 0.0);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the volume.
pub fn boundary_voxels(mask: &Volume) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.shape();
    let fg = |x: usize, y: usize, z: usize| mask.get(x, y, z) != 0.0;
    let mut out = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !fg(x, y, z) {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                if edge
                    || !fg(x - 1, y, z)
                    || !fg(x + 1, y, z)
                    || !fg(x, y - 1, z)
                    || !fg(x, y + 1, z)
                    || !fg(x, y, z - 1)
                    || !fg(x, y, z + 1)
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Squared physical distance between voxel centres, summed x, y, z.
#[inline]
pub fn squared_distance(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let t = (a[k] as f64 - b[k] as f64) * spacing[k];
        s += t * t;
    }
    s
}

/// Static 3-d tree for exact nearest-neighbour queries under the anisotropic
/// metric above.
struct KdTree {
    /// Points permuted into implicit-tree order: the median of each range is
    /// the node, split axis is depth % 3.
    pts: Vec<[usize; 3]>,
    spacing: [f64; 3],
}

impl KdTree {
    fn new(mut pts: Vec<[usize; 3]>, spacing: [f64; 3]) -> Self {
        fn build(p: &mut [[usize; 3]], depth: usize) {
            if p.len() <= 1 {
                return;
            }
            let axis = depth % 3;
            let mid = p.len() / 2;
            p.select_nth_unstable_by_key(mid, |q| q[axis]);
            let (l, r) = p.split_at_mut(mid);
            build(l, depth + 1);
            build(&mut r[1..], depth + 1);
        }
        build(&mut pts, 0);
        Self { pts, spacing }
    }

    fn nearest_sq(&self, q: [usize; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.pts.len(), 0, q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: [usize; 3], best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.pts[mid];
        let d = squared_distance(p, q, self.spacing);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let (near, far) = if q[axis] < p[axis] {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, q, best);
        // Floating-point sums of non-negative terms never fall below any
        // single term, so this bound is exact.
        let t = (q[axis] as f64 - p[axis] as f64) * self.spacing[axis];
        if t * t <= *best {
            self.search(far.0, far.1, depth + 1, q, best);
        }
    }
}

fn directed_p95(from: &[[usize; 3]], to: &KdTree) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|a| to.nearest_sq(*a).sqrt()).collect();
    d.sort_by(f64::total_cmp);
    stats::percentile_sorted(&d, 95.0).unwrap_or(0.0)
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries in
/// physical units (`spacing` per axis). Returns `+inf` when exactly one mask
/// is empty and 0 when both are.
pub fn hd95(pred: &Volume, gt: &Volume, spacing: [f64; 3]) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    let bp = boundary_voxels(pred);
    let bg = boundary_voxels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let (tp, tg) = rayon::join(|| KdTree::new(bp.clone(), spacing), || KdTree::new(bg.clone(), spacing));
    let (a, b) = rayon::join(|| directed_p95(&bp, &tg), || directed_p95(&bg, &tp));
    Ok(a.max(b))
}

const NEIGHBOURS_26: usize = 26;

fn neighbour_offsets() -> [[isize; 3]; NEIGHBOURS_26] {
    let mut out = [[0; 3]; NEIGHBOURS_26];
    let mut i = 0;
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out[i] = [dx, dy, dz];
                    i += 1;
                }
            }
        }
    }
    out
}

/// Labels 26-connected foreground components in order of their lowest voxel
/// index (label 1 first). Returns the label field and component sizes.
pub fn connected_components(mask: &Volume) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = mask.shape();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let offs = neighbour_offsets();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask.data()[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
            for o in &offs {
                let (qx, qy, qz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                    continue;
                }
                let j = mask.index(qx as usize, qy as usize, qz as usize);
                if mask.data()[j] != 0.0 && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest 26-connected component (ties go to the component
/// containing the lowest voxel index). Empty masks are returned unchanged.
pub fn largest_component(mask: &Volume) -> Result<Volume> {
    let (labels, sizes) = connected_components(mask);
    if sizes.is_empty() {
        return Ok(mask.clone());
    }
    let mut best = 0;
    for (i, s) in sizes.iter().enumerate() {
        if *s > sizes[best] {
            best = i;
        }
    }
    let keep = best as u32 + 1;
    let data = mask
        .data()
        .iter()
        .zip(&labels)
        .map(|(v, l)| if *l == keep { *v } else { 0.0 })
        .collect();
    mask.with_data(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub case_id: String,
    pub dice: f64,
    /// Millimetres; `+inf` when exactly one mask is empty.
    pub hd95: f64,
}

/// Dice and HD95 of the foreground (`label >= 1`) of two label volumes.
pub fn evaluate_case(case_id: &str, pred: &Volume, gt: &Volume) -> Result<EvalResult> {
    Ok(EvalResult {
        case_id: case_id.to_string(),
        dice: dice_score(pred, gt)?,
        hd95: {
            check_grid(pred, gt)?;
            hd95(pred, gt, gt.spacing())?
        },
    })
}

/// Mean, median and population std of a column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    Summary {
        mean: stats::mean(values),
        median: stats::median(values),
        std: stats::std_dev(values),
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// Writes `case_id,dice,hd95` rows followed by `mean`, `median` and `std`
/// summary rows.
pub fn write_eval_csv(results: &[EvalResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(["case_id", "dice", "hd95"]).map_err(wrap)?;
    for r in results {
        w.write_record([r.case_id.clone(), fmt_metric(r.dice), fmt_metric(r.hd95)]).map_err(wrap)?;
    }
    let d = summarize(&results.iter().map(|r| r.dice).collect::<Vec<_>>());
    let h = summarize(&results.iter().map(|r| r.hd95).collect::<Vec<_>>());
    for (name, a, b) in [("mean", d.mean, h.mean), ("median", d.median, h.median), ("std", d.std, h.std)] {
        w.write_record([name.to_string(), fmt_metric(a), fmt_metric(b)]).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the per-case rows of a file written by [`write_eval_csv`].
pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let id = rec.get(0).unwrap_or_default();
        if matches!(id, "mean" | "median" | "std") {
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("bad number in row for {id}")))
        };
        out.push(EvalResult {
            case_id: id.to_string(),
            dice: num(1)?,
            hd95: num(2)?,
        });
    }
    Ok(out)
}

/// Binary mask (`value >= 1` -> 1) as a label volume.
pub fn binarize(vol: &Volume) -> Result<Volume> {
    vol.with_data_kind(
        vol.data().iter().map(|v| if *v >= 1.0 { 1.0 } else { 0.0 }).collect(),
        VolumeKind::Label,
    )
}

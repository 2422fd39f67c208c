//! Surface extraction from binary masks, Taubin smoothing, mesh statistics
//! and STL/OBJ export.
//!
//! The marching-cubes case table is generated at first use. Each cube face
//! with diagonally opposite foreground corners is resolved by separating the
//! foreground corners; the decision depends only on the face itself, so
//! neighbouring cubes always agree and the extracted surface is closed.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const TAUBIN_LAMBDA: f64 = 0.5;
pub const TAUBIN_MU: f64 = -0.53;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    /// Millimetre coordinates.
    pub vertices: Vec<[f64; 3]>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!("triangle {t:?} references a vertex out of range ({n} vertices)")));
        }
        Ok(())
    }

    /// Triangle corner coordinates rounded to `f32`, as stored in STL.
    pub fn triangle_soup(&self) -> Vec<[[f32; 3]; 3]> {
        self.triangles
            .iter()
            .map(|t| t.map(|i| self.vertices[i as usize].map(|c| c as f32)))
            .collect()
    }

    /// Rebuilds an indexed mesh from a soup, merging bitwise-equal corners.
    pub fn from_soup(soup: &[[[f32; 3]; 3]]) -> Self {
        let mut index: HashMap<[u32; 3], u32> = HashMap::new();
        let mut mesh = TriMesh::default();
        for tri in soup {
            let t = tri.map(|p| {
                *index.entry(p.map(f32::to_bits)).or_insert_with(|| {
                    mesh.vertices.push(p.map(f64::from));
                    (mesh.vertices.len() - 1) as u32
                })
            });
            mesh.triangles.push(t);
        }
        mesh
    }
}

// ---------------------------------------------------------------------------
// case table

/// Corner `c` sits at `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
fn corner_pos(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as `(lower corner, axis)`.
fn cube_edges() -> [(usize, usize); 12] {
    let mut out = [(0, 0); 12];
    let mut n = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if corner_pos(c)[axis] == 0 {
                out[n] = (c, axis);
                n += 1;
            }
        }
    }
    out
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    cube_edges().iter().position(|&e| e == (lo, axis)).expect("corners are not adjacent")
}

fn edge_mid(e: usize) -> [f64; 3] {
    let (c, axis) = cube_edges()[e];
    let mut p = corner_pos(c).map(|v| v as f64);
    p[axis] += 0.5;
    p
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// How a polygon of the table is split into triangles.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Fan {
    /// Fan from the polygon vertex at this position.
    Vertex(usize),
    /// Fan from an added centroid vertex.
    Centroid,
}

#[derive(Debug, Clone)]
struct Polygon {
    edges: Vec<u8>,
    fan: Fan,
}

fn fan_ok(pts: &[[f64; 3]], start: usize) -> bool {
    let n = pts.len();
    (1..n - 1).all(|i| {
        let (a, b, c) = (pts[start], pts[(start + i) % n], pts[(start + i + 1) % n]);
        norm(cross(sub(b, a), sub(c, a))) > 1e-9
    })
}

fn build_case(cfg: usize) -> Vec<Polygon> {
    let inside = |c: usize| (cfg >> c) & 1 == 1;
    let mut next = [usize::MAX; 12];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let at = |a: usize, b: usize| (side << axis) | (a << u) | (b << v);
            let ring = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
            let mut m = [0.0; 3];
            m[axis] = if side == 1 { 1.0 } else { -1.0 };
            let ring_edge = |i: usize| edge_between(ring[i], ring[(i + 1) % 4]);
            let crossing: Vec<usize> = (0..4).filter(|&i| inside(ring[i]) != inside(ring[(i + 1) % 4])).collect();
            let mut segments = Vec::new();
            match crossing.len() {
                0 => {}
                2 => {
                    let ins = *ring.iter().find(|&&c| inside(c)).unwrap();
                    segments.push((ring_edge(crossing[0]), ring_edge(crossing[1]), ins));
                }
                _ => {
                    for i in 0..4 {
                        if inside(ring[i]) {
                            segments.push((ring_edge((i + 3) % 4), ring_edge(i), ring[i]));
                        }
                    }
                }
            }
            for (p, q, ins) in segments {
                let (pp, qp) = (edge_mid(p), edge_mid(q));
                let ip = corner_pos(ins).map(|c| c as f64);
                let (p, q) = if dot(cross(sub(qp, pp), sub(ip, pp)), m) < 0.0 { (p, q) } else { (q, p) };
                debug_assert_eq!(next[p], usize::MAX);
                next[p] = q;
            }
        }
    }
    let mut seen = [false; 12];
    let mut polys = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut ring = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            ring.push(e as u8);
            e = next[e];
        }
        let pts: Vec<[f64; 3]> = ring.iter().map(|&e| edge_mid(e as usize)).collect();
        let fan = (0..ring.len()).find(|&s| fan_ok(&pts, s)).map_or(Fan::Centroid, Fan::Vertex);
        polys.push(Polygon { edges: ring, fan });
    }
    polys
}

fn case_table() -> &'static [Vec<Polygon>] {
    static TABLE: OnceLock<Vec<Vec<Polygon>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

// ---------------------------------------------------------------------------
// extraction

/// Iso-surface of a binary mask at level 0.5, with vertices at edge
/// midpoints. The mask is zero-padded by one voxel so the surface is closed.
pub fn marching_cubes(mask: &Volume, smooth_iters: usize) -> Result<TriMesh> {
    if mask.count_nonzero() == 0 {
        return Err(Error::EmptyForeground("cannot mesh an empty mask".into()));
    }
    let [nx, ny, nz] = mask.shape();
    let (spacing, origin) = (mask.spacing(), mask.origin());
    let p = [nx + 2, ny + 2, nz + 2];
    let fg = |x: usize, y: usize, z: usize| {
        x >= 1 && y >= 1 && z >= 1 && x <= nx && y <= ny && z <= nz && mask.get(x - 1, y - 1, z - 1) != 0.0
    };
    let table = case_table();
    let edges = cube_edges();
    let mut mesh = TriMesh::default();
    let mut vertex_of: HashMap<(usize, usize), u32> = HashMap::new();
    let to_mm = |q: [f64; 3]| std::array::from_fn(|a| origin[a] + (q[a] - 1.0) * spacing[a]);

    for x in 0..p[0] - 1 {
        for y in 0..p[1] - 1 {
            for z in 0..p[2] - 1 {
                let mut cfg = 0;
                for c in 0..8 {
                    let [dx, dy, dz] = corner_pos(c);
                    if fg(x + dx, y + dy, z + dz) {
                        cfg |= 1 << c;
                    }
                }
                if cfg == 0 || cfg == 255 {
                    continue;
                }
                for poly in &table[cfg] {
                    let ids: Vec<u32> = poly
                        .edges
                        .iter()
                        .map(|&e| {
                            let (c, axis) = edges[e as usize];
                            let [dx, dy, dz] = corner_pos(c);
                            let base = [x + dx, y + dy, z + dz];
                            let key = ((base[0] * p[1] + base[1]) * p[2] + base[2], axis);
                            *vertex_of.entry(key).or_insert_with(|| {
                                let mut q = base.map(|v| v as f64);
                                q[axis] += 0.5;
                                mesh.vertices.push(to_mm(q));
                                (mesh.vertices.len() - 1) as u32
                            })
                        })
                        .collect();
                    let n = ids.len();
                    match poly.fan {
                        Fan::Vertex(s) => {
                            for i in 1..n - 1 {
                                mesh.triangles.push([ids[s], ids[(s + i) % n], ids[(s + i + 1) % n]]);
                            }
                        }
                        Fan::Centroid => {
                            let mut c = [0.0; 3];
                            for &i in &ids {
                                for a in 0..3 {
                                    c[a] += mesh.vertices[i as usize][a] / n as f64;
                                }
                            }
                            mesh.vertices.push(c);
                            let ci = (mesh.vertices.len() - 1) as u32;
                            for i in 0..n {
                                mesh.triangles.push([ci, ids[i], ids[(i + 1) % n]]);
                            }
                        }
                    }
                }
            }
        }
    }
    taubin_smooth(&mut mesh, smooth_iters);
    Ok(mesh)
}

fn neighbours(mesh: &TriMesh) -> Vec<Vec<u32>> {
    let mut nb: Vec<Vec<u32>> = vec![Vec::new(); mesh.vertices.len()];
    for t in &mesh.triangles {
        for i in 0..3 {
            let (a, b) = (t[i], t[(i + 1) % 3]);
            nb[a as usize].push(b);
            nb[b as usize].push(a);
        }
    }
    for n in &mut nb {
        n.sort_unstable();
        n.dedup();
    }
    nb
}

/// Alternating shrink (`lambda`) and inflate (`mu`) umbrella steps.
pub fn taubin_smooth(mesh: &mut TriMesh, iters: usize) {
    if iters == 0 {
        return;
    }
    let nb = neighbours(mesh);
    for _ in 0..iters {
        for f in [TAUBIN_LAMBDA, TAUBIN_MU] {
            let old = mesh.vertices.clone();
            for (v, n) in mesh.vertices.iter_mut().zip(&nb) {
                if n.is_empty() {
                    continue;
                }
                let inv = 1.0 / n.len() as f64;
                for a in 0..3 {
                    let mean: f64 = n.iter().map(|&j| old[j as usize][a]).sum::<f64>() * inv;
                    v[a] += f * (mean - v[a]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshStats {
    pub watertight: bool,
    pub euler: i64,
    /// Signed, positive for outward winding (mm^3).
    pub volume: f64,
    pub area: f64,
    pub n_components: usize,
    pub n_vertices: usize,
    pub n_triangles: usize,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Euler characteristic counts only vertices referenced by a triangle.
pub fn mesh_stats(mesh: &TriMesh) -> MeshStats {
    let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
    let mut used = vec![false; mesh.vertices.len()];
    let mut parent: Vec<usize> = (0..mesh.vertices.len()).collect();
    let (mut volume, mut area) = (0.0, 0.0);
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        volume += dot(a, cross(b, c)) / 6.0;
        area += norm(cross(sub(b, a), sub(c, a))) / 2.0;
        for i in 0..3 {
            let (u, v) = (t[i], t[(i + 1) % 3]);
            *edges.entry((u.min(v), u.max(v))).or_default() += 1;
            used[u as usize] = true;
            let (ru, rv) = (find(&mut parent, u as usize), find(&mut parent, v as usize));
            parent[ru] = rv;
        }
    }
    let nv = used.iter().filter(|&&u| u).count();
    let n_components = (0..mesh.vertices.len())
        .filter(|&i| used[i] && find(&mut parent, i) == i)
        .count();
    MeshStats {
        watertight: !mesh.triangles.is_empty() && edges.values().all(|&n| n == 2),
        euler: nv as i64 - edges.len() as i64 + mesh.triangles.len() as i64,
        volume,
        area,
        n_components,
        n_vertices: nv,
        n_triangles: mesh.triangles.len(),
    }
}

// ---------------------------------------------------------------------------
// files

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshFormat {
    StlBinary,
    Obj,
}

impl std::str::FromStr for MeshFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stl" | "stl_binary" => Ok(MeshFormat::StlBinary),
            "obj" => Ok(MeshFormat::Obj),
            _ => Err(Error::InvalidArgument(format!("unknown mesh format {s:?} (expected stl or obj)"))),
        }
    }
}

const STL_HEADER: &[u8] = b"binary STL";

pub fn save_mesh(mesh: &TriMesh, path: &Path, format: MeshFormat) -> Result<()> {
    if mesh.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty mesh".into()));
    }
    mesh.validate()?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let res = match format {
        MeshFormat::StlBinary => write_stl(mesh, &mut w),
        MeshFormat::Obj => write_obj(mesh, &mut w),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_stl<W: Write>(mesh: &TriMesh, w: &mut W) -> std::io::Result<()> {
    let mut header = [0u8; 80];
    header[..STL_HEADER.len()].copy_from_slice(STL_HEADER);
    w.write_all(&header)?;
    w.write_u32::<LittleEndian>(mesh.triangles.len() as u32)?;
    for tri in mesh.triangle_soup() {
        let [a, b, c] = tri.map(|p| p.map(f64::from));
        let n = cross(sub(b, a), sub(c, a));
        let l = norm(n);
        let n = if l > 0.0 { n.map(|v| v / l) } else { [0.0; 3] };
        for v in n {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for p in tri {
            for v in p {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.write_u16::<LittleEndian>(0)?;
    }
    Ok(())
}

fn write_obj<W: Write>(mesh: &TriMesh, w: &mut W) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

/// Reads a binary STL as a triangle soup.
pub fn load_stl(path: &Path) -> Result<Vec<[[f32; 3]; 3]>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(f);
    let mut header = [0u8; 80];
    r.read_exact(&mut header).map_err(|_| Error::format(path, "truncated STL header"))?;
    let n = r.read_u32::<LittleEndian>().map_err(|_| Error::format(path, "truncated STL header"))? as u64;
    if len != 84 + 50 * n {
        return Err(Error::format(path, format!("{n} triangles need {} bytes, file has {len}", 84 + 50 * n)));
    }
    let mut out = Vec::with_capacity(n as usize);
    let mut rec = [0f32; 12];
    for _ in 0..n {
        r.read_f32_into::<LittleEndian>(&mut rec).map_err(|e| Error::io(path, e))?;
        r.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        out.push(std::array::from_fn(|i| std::array::from_fn(|a| rec[3 + 3 * i + a])));
    }
    Ok(out)
}

/// Reads `v`/`f` records of a triangle OBJ (1-based indices).
pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut mesh = TriMesh::default();
    for (no, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut it = line.split_whitespace();
        let bad = || Error::format(path, format!("line {}: {line:?}", no + 1));
        match it.next() {
            Some("v") => {
                let v: Vec<f64> = it.map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                let v: [f64; 3] = v.try_into().map_err(|_| bad())?;
                mesh.vertices.push(v);
            }
            Some("f") => {
                let f: Vec<u32> = it.map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                let f: [u32; 3] = f.try_into().map_err(|_| bad())?;
                if f.contains(&0) {
                    return Err(bad());
                }
                mesh.triangles.push(f.map(|i| i - 1));
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;

    fn mask(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Volume {
        let mut d = Vec::new();
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    d.push(f(x, y, z) as u8 as f32);
                }
            }
        }
        Volume::new(d, shape, [1.0; 3], [0.0; 3], VolumeKind::Label).unwrap()
    }

    pub(crate) fn unit_cube(offset: [f64; 3]) -> TriMesh {
        let vertices = (0..8)
            .map(|c| {
                let p = corner_pos(c);
                std::array::from_fn(|a| p[a] as f64 + offset[a])
            })
            .collect();
        // outward CCW quads split in two
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let mut triangles = Vec::new();
        for q in quads {
            triangles.push([q[0], q[1], q[2]]);
            triangles.push([q[0], q[2], q[3]]);
        }
        TriMesh { vertices, triangles }
    }

    #[test]
    fn every_case_links_into_closed_rings() {
        for cfg in 1..255 {
            let polys = build_case(cfg);
            assert!(!polys.is_empty(), "case {cfg}");
            let n: usize = polys.iter().map(|p| p.edges.len()).sum();
            let crossing = cube_edges()
                .iter()
                .filter(|&&(c, a)| ((cfg >> c) & 1) != ((cfg >> (c | 1 << a)) & 1))
                .count();
            assert_eq!(n, crossing, "case {cfg}");
        }
    }

    #[test]
    fn single_voxel_is_a_sphere() {
        let m = marching_cubes(&mask([1, 1, 1], |_, _, _| true), 0).unwrap();
        let s = mesh_stats(&m);
        assert!(s.watertight);
        assert_eq!(s.euler, 2);
        assert_eq!(s.n_components, 1);
        // octahedron with vertices at the face centres
        assert_eq!(s.n_vertices, 6);
        assert!((s.volume - 4.0 / 3.0 * 0.125).abs() < 1e-12, "{}", s.volume);
    }

    #[test]
    fn cube_stats() {
        let s = mesh_stats(&unit_cube([0.0; 3]));
        assert!(s.watertight);
        assert_eq!((s.euler, s.n_components), (2, 1));
        assert!((s.volume - 1.0).abs() < 1e-12);
        assert!((s.area - 6.0).abs() < 1e-12);
    }

    #[test]
    fn missing_triangle_breaks_watertightness() {
        let mut m = unit_cube([0.0; 3]);
        m.triangles.pop();
        assert!(!mesh_stats(&m).watertight);
    }

    #[test]
    fn disjoint_cubes_are_two_components() {
        let mut a = unit_cube([0.0; 3]);
        let b = unit_cube([3.0, 0.0, 0.0]);
        let off = a.vertices.len() as u32;
        a.vertices.extend(b.vertices);
        a.triangles.extend(b.triangles.iter().map(|t| t.map(|i| i + off)));
        let s = mesh_stats(&a);
        assert_eq!(s.n_components, 2);
        assert_eq!(s.euler, 4);
        assert!((s.volume - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_voxels_stay_manifold() {
        // two voxels sharing only a corner, and two sharing only an edge
        for m in [
            mask([2, 2, 2], |x, y, z| (x, y, z) == (0, 0, 0) || (x, y, z) == (1, 1, 1)),
            mask([2, 2, 1], |x, y, _| x == y),
        ] {
            let s = mesh_stats(&marching_cubes(&m, 0).unwrap());
            assert!(s.watertight);
            assert_eq!(s.n_components, 2);
            assert_eq!(s.euler, 4);
        }
    }

    #[test]
    fn spacing_and_origin_applied() {
        let mut v = mask([1, 1, 1], |_, _, _| true);
        v = Volume::new(v.into_data(), [1, 1, 1], [2.0, 1.0, 1.0], [10.0, 0.0, 0.0], VolumeKind::Label).unwrap();
        let m = marching_cubes(&v, 0).unwrap();
        let xs: Vec<f64> = m.vertices.iter().map(|p| p[0]).collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (9.0, 11.0));
    }

    #[test]
    fn empty_mask_and_empty_mesh_rejected() {
        assert!(marching_cubes(&mask([3, 3, 3], |_, _, _| false), 0).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(save_mesh(&TriMesh::default(), &dir.path().join("e.stl"), MeshFormat::StlBinary).is_err());
    }

    #[test]
    fn obj_cube_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.obj");
        let cube = unit_cube([0.0; 3]);
        save_mesh(&cube, &p, MeshFormat::Obj).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 8);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 12);
        assert_eq!(load_obj(&p).unwrap(), cube);
    }

    #[test]
    fn stl_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.stl");
        let cube = unit_cube([0.5, -1.25, 3.0]);
        save_mesh(&cube, &p, MeshFormat::StlBinary).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 84 + 50 * 12);
        let soup = load_stl(&p).unwrap();
        assert_eq!(soup, cube.triangle_soup());
        assert_eq!(TriMesh::from_soup(&soup).triangle_soup(), soup);
        assert_eq!(TriMesh::from_soup(&soup).vertices.len(), 8);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_stl(&p).is_err());
    }
}

//! Marching-cubes extraction from sparse TSDFs and ASCII PLY output.

mod tables;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{Error, Result};
use crate::grid::{SparseTsdf, VoxelCoord};
use tables::{EDGE_TABLE, TRI_TABLE};

/// Cube corner offsets in table order.
const CORNERS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    /// Meters.
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| nalgebra::Vector3::from(self.vertices[i as usize]));
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Use count of every undirected edge.
    pub fn edge_counts(&self) -> FxHashMap<(u32, u32), usize> {
        let mut counts = FxHashMap::default();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed_manifold(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&n| n == 2)
    }

    pub fn to_ply(&self) -> String {
        let mut s = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        );
        for v in &self.vertices {
            let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    /// Parses the ASCII layout written by [`TriangleMesh::to_ply`].
    pub fn from_ply(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("ply: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("ply") {
            return Err(bad("missing magic"));
        }
        let (mut nv, mut nf) = (None, None);
        for line in lines.by_ref() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["end_header"] => break,
                ["format", fmt, _] if *fmt != "ascii" => return Err(bad("only ascii is supported")),
                ["element", "vertex", n] => nv = n.parse().ok(),
                ["element", "face", n] => nf = n.parse().ok(),
                _ => {}
            }
        }
        let (nv, nf): (usize, usize) = (nv.ok_or_else(|| bad("no vertex count"))?, nf.ok_or_else(|| bad("no face count"))?);
        let mut mesh = TriangleMesh::default();
        for _ in 0..nv {
            let line = lines.next().ok_or_else(|| bad("truncated vertices"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad vertex"))?;
            let v: [f64; 3] = v.try_into().map_err(|_| bad("vertex needs 3 coordinates"))?;
            mesh.vertices.push(v);
        }
        for _ in 0..nf {
            let line = lines.next().ok_or_else(|| bad("truncated faces"))?;
            let f: Vec<u32> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad face"))?;
            match f.as_slice() {
                [3, a, b, c] if [a, b, c].iter().all(|&&i| (i as usize) < nv) => mesh.triangles.push([*a, *b, *c]),
                _ => return Err(bad("faces must be triangles with valid indices")),
            }
        }
        Ok(mesh)
    }
}

pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    fs::write(path, mesh.to_ply())?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    TriangleMesh::from_ply(&fs::read_to_string(path)?)
}

/// Extracts the zero level set of `s`.
///
/// Every unit cube with at least one stored corner is visited in sorted
/// order; missing corners read as `+τ`. Cubes that pair a missing corner
/// with a corner at `-τ` or below are skipped: such a sign change is the
/// edge of the known region, not a surface.
pub fn marching_cubes(s: &SparseTsdf) -> TriangleMesh {
    let tau = s.truncation;
    let mut cubes: FxHashSet<VoxelCoord> = FxHashSet::default();
    for c in s.iter().map(|(c, _)| *c) {
        for o in &CORNERS {
            cubes.insert(c.offset(-o[0], -o[1], -o[2]));
        }
    }
    let mut cubes: Vec<VoxelCoord> = cubes.into_iter().collect();
    cubes.sort_unstable();

    let mut mesh = TriangleMesh::default();
    let mut vertex_of: FxHashMap<(VoxelCoord, u8), u32> = FxHashMap::default();
    let vs = s.voxel_size as f64;
    for cube in cubes {
        let mut values = [0.0f32; 8];
        let mut missing = false;
        let mut deep = false;
        let mut case = 0usize;
        for (i, o) in CORNERS.iter().enumerate() {
            let v = match s.get(&cube.offset(o[0], o[1], o[2])) {
                Some(e) => e.d,
                None => {
                    missing = true;
                    tau
                }
            };
            deep |= v <= -tau;
            values[i] = v;
            if v < 0.0 {
                case |= 1 << i;
            }
        }
        if EDGE_TABLE[case] == 0 || (missing && deep) {
            continue;
        }
        let mut edge_vertex = [0u32; 12];
        for (e, &[a, b]) in EDGES.iter().enumerate() {
            if EDGE_TABLE[case] & (1 << e) == 0 {
                continue;
            }
            // Key each edge by its lower corner and axis so neighbours share vertices.
            let (ca, cb) = (CORNERS[a], CORNERS[b]);
            let lo = if ca <= cb { ca } else { cb };
            let axis = (0..3).find(|&k| ca[k] != cb[k]).expect("edge spans one axis") as u8;
            let key = (cube.offset(lo[0], lo[1], lo[2]), axis);
            edge_vertex[e] = *vertex_of.entry(key).or_insert_with(|| {
                let (va, vb) = (values[a] as f64, values[b] as f64);
                let t = va / (va - vb);
                let base = cube.xyz();
                let p = [0, 1, 2].map(|k| (base[k] as f64 + ca[k] as f64 + t * (cb[k] - ca[k]) as f64) * vs);
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            });
        }
        for tri in TRI_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
            mesh.triangles.push([tri[0], tri[1], tri[2]].map(|e| edge_vertex[e as usize]));
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TsdfEntry;

    fn field(vs: f32, n: i32, f: impl Fn([f64; 3]) -> f64) -> SparseTsdf {
        let mut s = SparseTsdf::new(vs, 3.0);
        for x in -n..=n {
            for y in -n..=n {
                for z in -n..=n {
                    let p = [x, y, z].map(|v| v as f64 * vs as f64);
                    let d = (f(p) / vs as f64).clamp(-3.0, 3.0) as f32;
                    if d < 3.0 {
                        s.insert(VoxelCoord::new(x, y, z), TsdfEntry::observed(d));
                    }
                }
            }
        }
        s
    }

    #[test]
    fn all_positive_gives_empty_mesh() {
        let s = field(0.1, 3, |_| 0.15);
        assert!(!s.is_empty());
        assert!(marching_cubes(&s).is_empty());
    }

    #[test]
    fn plane_vertices_lie_on_plane() {
        let n = nalgebra::Vector3::new(0.3, -0.2, 0.9).normalize();
        let s = field(0.1, 6, |p| n.dot(&nalgebra::Vector3::from(p)) - 0.013);
        let m = marching_cubes(&s);
        assert!(!m.is_empty());
        // The sampled box ends abruptly; its outer layer can close off the
        // field, so only vertices away from it are checked.
        let inner: Vec<_> = m.vertices.iter().filter(|v| v.iter().all(|x| x.abs() < 0.5)).collect();
        assert!(inner.len() > 50);
        for v in inner {
            let d = n.dot(&nalgebra::Vector3::from(*v)) - 0.013;
            assert!(d.abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn sphere_is_closed_with_right_area() {
        let r = 0.2;
        let c = [0.0031, -0.0047, 0.0019];
        let s = field(0.02, 14, |p| {
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() - r
        });
        let m = marching_cubes(&s);
        assert!(m.is_closed_manifold());
        let want = 4.0 * std::f64::consts::PI * r * r;
        assert!((m.area() - want).abs() / want < 0.05, "{} vs {want}", m.area());
    }

    #[test]
    fn ply_round_trip() {
        let s = field(0.1, 4, |p| p[2] - 0.05);
        let m = marching_cubes(&s);
        let back = TriangleMesh::from_ply(&m.to_ply()).unwrap();
        assert_eq!(back.triangles, m.triangles);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert_eq!(a, b);
        }
        assert!(TriangleMesh::from_ply("ply\nend_header\n").is_err());
    }
}

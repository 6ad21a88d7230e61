//! Triangle surfaces: extraction from labels, simplification, smoothing,
//! energy-driven refinement along vertex normals and rasterization back to
//! labels.

mod decimate;
mod energy;
mod marching;
mod ply;
mod raster;

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::Vec3;

pub use decimate::{decimate, Decimation};
pub use energy::{
    deform_mesh, external_energy, internal_energy, vertex_term_literal, Deformation, EnergyModel, EnergyParts,
    MeshEnergyParams,
};
pub use marching::marching_cubes;
pub use ply::{read_ply, write_ply};
pub use raster::mesh_to_label;

/// Triangle surface with per-vertex unit normals and signed normal
/// displacements (mm, positive outward).
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
    pub displacement: Vec<f64>,
}

impl SurfaceMesh {
    /// Build a mesh at rest, computing normals.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&v| v >= n)) {
            return Err(Error::InvalidArgument(format!("triangle {t:?} references a missing vertex")));
        }
        let mut m = Self {
            displacement: vec![0.0; n],
            normals: vec![Vec3::zeros(); n],
            vertices,
            triangles,
        };
        m.recompute_normals();
        Ok(m)
    }

    /// Recursively subdivided icosahedron projected on a sphere.
    pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Vec3::from(*p).normalize())
        .collect();
        let mut tris: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(tris.len() * 4);
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                    verts.len() - 1
                })
            };
            for [a, b, c] in tris {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            tris = next;
        }
        let verts = verts.into_iter().map(|v| center + v * radius).collect();
        Self::new(verts, tris).expect("icosphere indices are valid")
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Area-weighted average of incident face normals, normalized.
    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            // The cross product is twice the area times the unit normal.
            let n = self.face_cross(t);
            for &v in t {
                acc[v] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
    }

    fn face_cross(&self, t: &[usize; 3]) -> Vec3 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        (b - a).cross(&(c - a))
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Sorted, de-duplicated neighbour lists.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            nb[a].push(b);
            nb[b].push(a);
        }
        for l in &mut nb {
            l.sort_unstable();
        }
        nb
    }

    /// Every edge is shared by exactly two triangles, traversed in opposite
    /// directions.
    pub fn check_watertight(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::NotWatertight("mesh has no triangles".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::NotWatertight(format!("degenerate triangle {t:?}")));
            }
            for e in 0..3 {
                *directed.entry((t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            let back = directed.get(&(b, a)).copied().unwrap_or(0);
            if count != 1 || back != 1 {
                return Err(Error::NotWatertight(format!("edge ({a}, {b}) used {count} times, reverse {back} times")));
            }
        }
        Ok(())
    }

    pub fn is_watertight(&self) -> bool {
        self.check_watertight().is_ok()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| 0.5 * self.face_cross(t).norm()).sum()
    }

    /// Signed enclosed volume by the divergence theorem (positive for
    /// outward-facing triangles).
    pub fn volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Vertex positions moved by `d` along the normals.
    pub fn displaced_positions(&self, d: &[f64]) -> Vec<Vec3> {
        self.vertices.iter().zip(&self.normals).zip(d).map(|((x, n), &s)| x + n * s).collect()
    }

    /// Drop unreferenced vertices and renumber.
    pub(crate) fn compacted(&self) -> SurfaceMesh {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        let mut disp = Vec::new();
        for t in &self.triangles {
            for &v in t {
                if map[v] == usize::MAX {
                    map[v] = verts.len();
                    verts.push(self.vertices[v]);
                    disp.push(self.displacement[v]);
                }
            }
        }
        let tris = self.triangles.iter().map(|t| t.map(|v| map[v])).collect();
        let mut m = SurfaceMesh::new(verts, tris).expect("compacted indices are valid");
        m.displacement = disp;
        m
    }
}

/// Move each vertex toward its 1-ring centroid by `lambda`, `iterations`
/// times, then recompute normals.
pub fn laplacian_smooth(m: &SurfaceMesh, iterations: usize, lambda: f64) -> Result<SurfaceMesh> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument("laplacian lambda must lie in (0, 1)".into()));
    }
    let mut out = m.clone();
    if iterations == 0 {
        return Ok(out);
    }
    let nb = m.neighbours();
    for _ in 0..iterations {
        let prev = out.vertices.clone();
        for (v, ring) in nb.iter().enumerate() {
            if ring.is_empty() {
                continue;
            }
            let c = ring.iter().fold(Vec3::zeros(), |s, &u| s + prev[u]) / ring.len() as f64;
            out.vertices[v] = prev[v] + (c - prev[v]) * lambda;
        }
    }
    out.recompute_normals();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn icosphere_is_closed_and_round() {
        let m = SurfaceMesh::icosphere(Vec3::new(1.0, 2.0, 3.0), 10.0, 4);
        assert_eq!(m.vertex_count(), 2562);
        m.check_watertight().unwrap();
        assert!((m.volume() - 4.0 / 3.0 * PI * 1000.0).abs() / (4.0 / 3.0 * PI * 1000.0) < 0.01);
        assert!((m.surface_area() - 4.0 * PI * 100.0).abs() / (4.0 * PI * 100.0) < 0.01);
        for (v, n) in m.vertices.iter().zip(&m.normals) {
            assert!((n.norm() - 1.0).abs() < 1e-6);
            assert!(n.dot(&(v - Vec3::new(1.0, 2.0, 3.0)).normalize()) > 0.99);
        }
    }

    #[test]
    fn watertight_check_rejects_open_and_non_manifold_meshes() {
        let m = SurfaceMesh::icosphere(Vec3::zeros(), 1.0, 1);
        let mut open = m.clone();
        open.triangles.pop();
        assert!(!open.is_watertight());
        let mut flipped = m.clone();
        flipped.triangles[0].swap(0, 1);
        assert!(!flipped.is_watertight());
    }

    #[test]
    fn smoothing_identity_and_planar_interior() {
        let m = SurfaceMesh::icosphere(Vec3::zeros(), 5.0, 2);
        assert_eq!(laplacian_smooth(&m, 0, 0.5).unwrap(), m);
        // Regular grid patch: interior vertices sit at their ring centroid.
        let n = 5;
        let verts: Vec<Vec3> = (0..n * n).map(|i| Vec3::new((i % n) as f64, (i / n) as f64, 0.0)).collect();
        let mut tris = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = i + n * j;
                tris.push([a, a + 1, a + n]);
                tris.push([a + 1, a + n + 1, a + n]);
                tris.push([a, a + n + 1, a + n]);
                tris.push([a, a + 1, a + n + 1]);
            }
        }
        // Use the 8-neighbour ring so the centroid is exact.
        let grid = SurfaceMesh::new(verts.clone(), tris).unwrap();
        let s = laplacian_smooth(&grid, 3, 0.5).unwrap();
        let centre = 2 + n * 2;
        assert!((s.vertices[centre] - verts[centre]).norm() < 1e-12);
        assert!(laplacian_smooth(&m, 1, 1.5).is_err());
    }

    #[test]
    fn smoothing_shrinks_a_sphere_monotonically() {
        let m = SurfaceMesh::icosphere(Vec3::zeros(), 10.0, 3);
        let area0 = m.surface_area();
        let mut prev = 10.0;
        for it in 1..=10 {
            let s = laplacian_smooth(&m, it, 0.5).unwrap();
            let r = s.vertices.iter().map(|v| v.norm()).sum::<f64>() / s.vertex_count() as f64;
            assert!(r < prev);
            prev = r;
            if it == 10 {
                assert!((s.surface_area() - area0).abs() / area0 < 0.15);
            }
        }
    }
}

//! Voxelization of a closed mesh by ray parity.

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap};

use super::SurfaceMesh;

/// Fractions of the voxel spacing by which rays are shifted off the lattice
/// lines, so that rays never pass exactly through vertices or edges of
/// meshes extracted from the same lattice.
const RAY_SHIFT: [f64; 2] = [1.379e-6, 2.113e-6];

/// Voxels whose centres lie inside `m`. Rays run along +x through each
/// (y, z) voxel row; a centre is inside when an odd number of crossings lie
/// before it.
pub fn mesh_to_label(m: &SurfaceMesh, grid: &Grid) -> Result<LabelMap> {
    m.check_watertight()?;
    let (lo, hi) = bounds(m);
    let diag = (hi - lo).norm();
    if !(m.volume().abs() > 1e-9 * diag.powi(3)) {
        return Err(Error::EmptyInterior);
    }
    let [nx, ny, nz] = grid.dims;
    let ray_y = |j: usize| grid.origin[1] + (j as f64 + RAY_SHIFT[0]) * grid.spacing[1];
    let ray_z = |k: usize| grid.origin[2] + (k as f64 + RAY_SHIFT[1]) * grid.spacing[2];
    // Triangles bucketed by the rows their projection can cover.
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); ny * nz];
    let row_range = |a: f64, b: f64, axis: usize, n: usize| -> Option<(usize, usize)> {
        let s = grid.spacing[axis];
        let o = grid.origin[axis];
        let first = ((a - o) / s - RAY_SHIFT[axis - 1]).ceil().max(0.0);
        let last = ((b - o) / s - RAY_SHIFT[axis - 1]).floor().min(n as f64 - 1.0);
        (first <= last).then(|| (first as usize, last as usize))
    };
    for (t, tri) in m.triangles.iter().enumerate() {
        let p = tri.map(|v| m.vertices[v]);
        let (ymin, ymax) = (p[0].y.min(p[1].y).min(p[2].y), p[0].y.max(p[1].y).max(p[2].y));
        let (zmin, zmax) = (p[0].z.min(p[1].z).min(p[2].z), p[0].z.max(p[1].z).max(p[2].z));
        if let (Some((j0, j1)), Some((k0, k1))) = (row_range(ymin, ymax, 1, ny), row_range(zmin, zmax, 2, nz)) {
            for k in k0..=k1 {
                for j in j0..=j1 {
                    rows[j + ny * k].push(t);
                }
            }
        }
    }
    let mut data = vec![0u8; grid.len()];
    let mut hits = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            let (y, z) = (ray_y(j), ray_z(k));
            hits.clear();
            for &t in &rows[j + ny * k] {
                let [a, b, c] = m.triangles[t].map(|v| m.vertices[v]);
                // Barycentric coordinates of (y, z) in the projected triangle.
                let det = (b.y - a.y) * (c.z - a.z) - (c.y - a.y) * (b.z - a.z);
                if det == 0.0 {
                    continue;
                }
                let u = ((y - a.y) * (c.z - a.z) - (c.y - a.y) * (z - a.z)) / det;
                let v = ((b.y - a.y) * (z - a.z) - (y - a.y) * (b.z - a.z)) / det;
                if u < 0.0 || v < 0.0 || u + v > 1.0 {
                    continue;
                }
                hits.push(a.x + u * (b.x - a.x) + v * (c.x - a.x));
            }
            if hits.is_empty() {
                continue;
            }
            hits.sort_by(f64::total_cmp);
            let mut h = 0;
            for i in 0..nx {
                let x = grid.origin[0] + i as f64 * grid.spacing[0];
                while h < hits.len() && hits[h] < x {
                    h += 1;
                }
                if h % 2 == 1 {
                    data[grid.index(i, j, k)] = 1;
                }
            }
        }
    }
    LabelMap::new(*grid, data)
}

fn bounds(m: &SurfaceMesh) -> (crate::Vec3, crate::Vec3) {
    let mut lo = crate::Vec3::repeat(f64::INFINITY);
    let mut hi = crate::Vec3::repeat(f64::NEG_INFINITY);
    for v in &m.vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::marching_cubes;
    use crate::Vec3;
    use std::f64::consts::PI;

    #[test]
    fn sphere_voxel_count() {
        let g = Grid::new([32, 32, 32], [1.0; 3], [0.0; 3]).unwrap();
        let m = SurfaceMesh::icosphere(Vec3::new(15.3, 15.6, 15.2), 10.0, 4);
        let l = mesh_to_label(&m, &g).unwrap();
        let v = 4.0 / 3.0 * PI * 1000.0;
        assert!((l.count() as f64 - v).abs() / v < 0.03, "{}", l.count());
    }

    #[test]
    fn round_trip_through_marching_cubes() {
        let g = Grid::new([30, 26, 22], [1.0, 1.2, 1.5], [-3.0, 2.0, 1.0]).unwrap();
        let c = Vec3::new(11.0, 17.0, 16.0);
        let l = LabelMap::from_fn(g, |x| ((x - c).component_div(&Vec3::new(9.0, 7.0, 8.0))).norm() <= 1.0);
        let m = marching_cubes(&l, 0.5).unwrap();
        let back = mesh_to_label(&m, &g).unwrap();
        let inter = l.data.iter().zip(&back.data).filter(|(a, b)| **a == 1 && **b == 1).count();
        let dice = 2.0 * inter as f64 / (l.count() + back.count()) as f64;
        assert!(dice >= 0.95, "dice {dice}");
    }

    #[test]
    fn degenerate_and_open_meshes_are_rejected() {
        let g = Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let flat = SurfaceMesh::new(
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2], [0, 2, 1]],
        )
        .unwrap();
        assert!(matches!(mesh_to_label(&flat, &g), Err(Error::EmptyInterior)));
        let mut open = SurfaceMesh::icosphere(Vec3::repeat(2.0), 1.0, 1);
        open.triangles.pop();
        assert!(matches!(mesh_to_label(&open, &g), Err(Error::NotWatertight(_))));
    }
}

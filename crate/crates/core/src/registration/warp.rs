//! Resampling of atlas labels into the subject grid.

use crate::volume::{Grid, LabelMap};

use super::transform::Transform;

/// Nearest-neighbour resampling of `label` onto `target`: each target voxel
/// takes the label found at its image under `transform` (subject → atlas).
/// Sub-label values are kept as they are.
pub fn warp_label(label: &LabelMap, transform: &Transform, target: &Grid) -> LabelMap {
    let mut data = vec![0u8; target.len()];
    for (idx, d) in data.iter_mut().enumerate() {
        let y = transform.map(&target.world_of_index(idx));
        if let Some([i, j, k]) = label.grid.nearest_voxel(&y) {
            *d = label.get(i, j, k);
        }
    }
    LabelMap {
        grid: *target,
        data,
        probability: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Affine;
    use crate::registration::RigidParams;
    use crate::{Mat3, Vec3};

    fn blob() -> LabelMap {
        let g = Grid::new([20, 20, 20], [1.0; 3], [0.0; 3]).unwrap();
        LabelMap::from_fn(g, |p| (p - Vec3::new(9.0, 10.0, 8.0)).norm() < 5.0)
    }

    #[test]
    fn identity_keeps_the_label() {
        let l = blob();
        assert_eq!(warp_label(&l, &Transform::identity(), &l.grid), l);
    }

    #[test]
    fn one_voxel_shift() {
        let l = blob();
        let t = Transform::new(
            Affine::identity(),
            RigidParams {
                rotation: [0.0; 3],
                translation: [1.0, 0.0, 0.0],
            },
            Vec3::zeros(),
        )
        .unwrap();
        let w = warp_label(&l, &t, &l.grid);
        for k in 0..20 {
            for j in 0..20 {
                for i in 0..19 {
                    assert_eq!(w.get(i, j, k), l.get(i + 1, j, k));
                }
            }
        }
    }

    #[test]
    fn rigid_rotation_keeps_volume_up_to_the_boundary_layer() {
        let l = blob();
        let t = Transform::new(
            Affine {
                matrix: Mat3::identity(),
                offset: Vec3::zeros(),
            },
            RigidParams {
                rotation: [0.2, -0.1, 0.35],
                translation: [0.3, 0.0, -0.4],
            },
            Vec3::new(9.0, 10.0, 8.0),
        )
        .unwrap();
        let w = warp_label(&l, &t, &l.grid);
        // Voxels with a background face-neighbour form the boundary layer.
        let boundary = (0..l.grid.len())
            .filter(|&idx| {
                let [i, j, k] = l.grid.coords(idx);
                l.data[idx] != 0
                    && [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|(a, b, c)| l.get((i as i64 + a) as usize, (j as i64 + b) as usize, (k as i64 + c) as usize) == 0)
            })
            .count();
        assert!((w.count() as i64 - l.count() as i64).unsigned_abs() as usize <= boundary);
    }
}

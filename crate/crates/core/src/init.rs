//! Initial alignment of atlases to a subject: head orientation from the
//! inferior skull, then per-axis scaling and translation from the brain
//! ellipsoids.

use serde::{Deserialize, Serialize};

use crate::brain::estimate_centroid;
use crate::error::{Error, Result};
use crate::geometry::{principal_axes, Affine, Ellipsoid};
use crate::volume::{LabelMap, Volume};
use crate::{Mat3, Vec3};

/// Mean position of the non-zero voxels in the topmost non-zero slice,
/// taken as the acquisition apex.
pub fn estimate_apex(us: &Volume) -> Result<Vec3> {
    let g = &us.grid;
    let [nx, ny, nz] = g.dims;
    for k in (0..nz).rev() {
        let mut sum = Vec3::zeros();
        let mut n = 0usize;
        for j in 0..ny {
            for i in 0..nx {
                if us.get(i, j, k) != 0.0 {
                    sum += g.world(i, j, k);
                    n += 1;
                }
            }
        }
        if n > 0 {
            return Ok(sum / n as f64);
        }
    }
    Err(Error::EmptyVolume)
}

/// Rotation taking world coordinates to the canonical head frame
/// (x anterior-posterior, y left-right, z towards the apex), estimated
/// from the skull voxels below the centroid.
pub fn orient_by_pca(us: &Volume, skull: &LabelMap) -> Result<Mat3> {
    let center = estimate_centroid(us)?;
    let apex = estimate_apex(us)?;
    orient_points(&skull.foreground_points(), &center, &apex)
}

/// Point-cloud core of [`orient_by_pca`].
///
/// The inferior region is cut perpendicular to the vertical axis of the
/// whole cloud rather than the image z axis, so a tilted head is split
/// along its own vertical; the principal axes of that inferior part give
/// the frame. Eigenvectors are matched to canonical axes by the permutation
/// closest to the reference frame; the z sign points at the apex, the x
/// sign keeps continuity, and y completes a right-handed frame.
pub fn orient_points(points: &[Vec3], center: &Vec3, apex: &Vec3) -> Result<Mat3> {
    let up = apex - center;
    if up.norm() == 0.0 {
        return Err(Error::Degenerate("apex coincides with the centre".into()));
    }
    let whole = principal_frame(points, &Mat3::identity(), &up)?;
    let vertical = whole.row(2).transpose();
    let inferior: Vec<Vec3> = points
        .iter()
        .filter(|p| (*p - center).dot(&vertical) < 0.0)
        .copied()
        .collect();
    principal_frame(&inferior, &whole, &up)
}

/// Principal axes as rows of a right-handed frame matched to `reference`.
fn principal_frame(points: &[Vec3], reference: &Mat3, up: &Vec3) -> Result<Mat3> {
    let pca = principal_axes(points)?;
    let ev = [
        pca.axes.column(0).into_owned(),
        pca.axes.column(1).into_owned(),
        pca.axes.column(2).into_owned(),
    ];
    let mut best = ([0usize, 1, 2], f64::NEG_INFINITY);
    for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let score: f64 = (0..3)
            .map(|k| ev[perm[k]].dot(&reference.row(k).transpose()).abs())
            .sum();
        if score > best.1 + 1e-12 {
            best = (perm, score);
        }
    }
    let perm = best.0;
    let mut x = ev[perm[0]];
    if x.dot(&reference.row(0).transpose()) < 0.0 {
        x = -x;
    }
    let mut z = ev[perm[2]];
    if z.dot(up) < 0.0 {
        z = -z;
    }
    let y = z.cross(&x).normalize();
    let x = y.cross(&z).normalize();
    Ok(Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
}

/// Per-axis scale and translation mapping an atlas brain onto the subject:
/// `y = scale ⊙ x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPrior {
    pub scale: Vec3,
    pub translation: Vec3,
}

impl SimilarityPrior {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale.component_mul(p) + self.translation
    }

    pub fn to_affine(&self) -> Affine {
        Affine {
            matrix: Mat3::from_diagonal(&self.scale),
            offset: self.translation,
        }
    }
}

/// Scale each world axis by the ratio of the ellipsoid radii along it and
/// move the atlas centre onto the subject centre.
pub fn prior_similarity_transform(subject: &Ellipsoid, atlas: &Ellipsoid) -> SimilarityPrior {
    let mut scale = Vec3::zeros();
    for k in 0..3 {
        let e = Vec3::ith(k, 1.0);
        scale[k] = subject.radius_along(&e) / atlas.radius_along(&e);
    }
    SimilarityPrior {
        scale,
        translation: subject.center - scale.component_mul(&atlas.center),
    }
}

/// Full atlas → subject map: scale in the canonical frame, then rotate into
/// the subject's orientation (`orientation` maps world to canonical).
pub fn atlas_alignment(subject: &Ellipsoid, orientation: &Mat3, atlas: &Ellipsoid) -> Affine {
    let back = orientation.transpose();
    let mut scale = Vec3::zeros();
    for k in 0..3 {
        let e = Vec3::ith(k, 1.0);
        scale[k] = subject.radius_along(&(back * e)) / atlas.radius_along(&(atlas.rotation * e));
    }
    let matrix = back * Mat3::from_diagonal(&scale) * atlas.rotation.transpose();
    Affine {
        matrix,
        offset: subject.center - matrix * atlas.center,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle, rotation_from_euler};
    use crate::phantom::rasterize_ellipsoid_shell;
    use crate::volume::Grid;

    fn bowl(rotation: Mat3) -> (Vec<Vec3>, Vec3, Vec3) {
        let grid = Grid::new([80, 80, 80], [2.0; 3], [-79.0; 3]).unwrap();
        let e = Ellipsoid::new(Vec3::zeros(), Vec3::new(62.0, 52.0, 44.0), rotation).unwrap();
        let pts = rasterize_ellipsoid_shell(&e, 0.93, 1.07, &grid).foreground_points();
        (pts, Vec3::zeros(), rotation * Vec3::new(0.0, 0.0, 46.0))
    }

    #[test]
    fn upright_head_gives_identity() {
        let (pts, c, apex) = bowl(Mat3::identity());
        let r = orient_points(&pts, &c, &apex).unwrap();
        assert!(rotation_angle(&r).to_degrees() < 2.0);
    }

    #[test]
    fn tilted_head_is_undone() {
        let tilt = rotation_from_euler([15f64.to_radians(), 0.0, 0.0]);
        let (pts, c, apex) = bowl(tilt);
        let r = orient_points(&pts, &c, &apex).unwrap();
        assert!(rotation_angle(&(r * tilt)).to_degrees() < 2.0);
        // A second application on the corrected cloud is close to identity.
        let corrected: Vec<Vec3> = pts.iter().map(|p| r * p).collect();
        let r2 = orient_points(&corrected, &c, &(r * apex)).unwrap();
        assert!(rotation_angle(&r2).to_degrees() < 2.0);
    }

    #[test]
    fn mirrored_clouds_share_the_frame() {
        let (pts, c, apex) = bowl(Mat3::identity());
        let mirrored: Vec<Vec3> = pts.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let a = orient_points(&pts, &c, &apex).unwrap();
        let b = orient_points(&mirrored, &c, &apex).unwrap();
        assert!((a - b).abs().max() < 1e-9);
        assert!(a.row(2).transpose().dot(&apex) > 0.0);
    }

    #[test]
    fn similarity_prior_examples() {
        let e = Ellipsoid::axis_aligned(Vec3::new(1.0, 2.0, 3.0), Vec3::new(50.0, 40.0, 40.0)).unwrap();
        let id = prior_similarity_transform(&e, &e);
        assert!((id.scale - Vec3::repeat(1.0)).norm() < 1e-12 && id.translation.norm() < 1e-12);
        let s = Ellipsoid::axis_aligned(Vec3::new(10.0, -4.0, 7.0), Vec3::new(60.0, 48.0, 48.0)).unwrap();
        let t = prior_similarity_transform(&s, &e);
        assert!((t.scale - Vec3::repeat(1.2)).norm() < 1e-12);
        assert!((t.apply(&e.center) - s.center).norm() < 1e-6);
        let a = atlas_alignment(&s, &Mat3::identity(), &e);
        assert!((a.apply(&e.center) - s.center).norm() < 1e-9);
        assert!((a.matrix - Mat3::from_diagonal(&Vec3::repeat(1.2))).abs().max() < 1e-12);
    }
}

//! Shared geometric primitives: the ellipsoid model, rotations, and
//! principal component analysis of point clouds.

use nalgebra::{Rotation3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// An ellipsoid in world coordinates.
///
/// Column `k` of `rotation` is the world direction of the axis whose
/// semi-axis length is `semi_axes[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    pub rotation: Mat3,
}

impl Ellipsoid {
    pub fn new(center: Vec3, semi_axes: Vec3, rotation: Mat3) -> Result<Self> {
        if semi_axes.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "semi-axes must be positive, got {semi_axes:?}"
            )));
        }
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if orth > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (deviation {orth:e})"
            )));
        }
        Ok(Self {
            center,
            semi_axes,
            rotation,
        })
    }

    pub fn axis_aligned(center: Vec3, semi_axes: Vec3) -> Result<Self> {
        Self::new(center, semi_axes, Mat3::identity())
    }

    pub fn sphere(center: Vec3, radius: f64) -> Result<Self> {
        Self::axis_aligned(center, Vec3::repeat(radius))
    }

    /// Coordinates of `p` in the ellipsoid's own axis frame.
    #[inline]
    pub fn local(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.center)
    }

    /// Normalized quadratic form Σ (xₖ/aₖ)²; equals 1 on the surface.
    #[inline]
    pub fn quadratic_form(&self, p: &Vec3) -> f64 {
        let l = self.local(p);
        (l.x / self.semi_axes.x).powi(2)
            + (l.y / self.semi_axes.y).powi(2)
            + (l.z / self.semi_axes.z).powi(2)
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.x * self.semi_axes.y * self.semi_axes.z
    }

    /// Distance from the centre to the surface along the world direction `dir`.
    pub fn radius_along(&self, dir: &Vec3) -> f64 {
        let d = self.rotation.transpose() * dir.normalize();
        let q = (d.x / self.semi_axes.x).powi(2)
            + (d.y / self.semi_axes.y).powi(2)
            + (d.z / self.semi_axes.z).powi(2);
        1.0 / q.sqrt()
    }
}

/// Affine map `p ↦ matrix·p + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub matrix: Mat3,
    pub offset: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            matrix: Mat3::identity(),
            offset: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.matrix * p + self.offset
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("singular affine map".into()))?;
        Ok(Self {
            matrix: inv,
            offset: -(inv * self.offset),
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine) -> Self {
        Self {
            matrix: self.matrix * other.matrix,
            offset: self.matrix * other.offset + self.offset,
        }
    }
}

/// Rotation matrix from Euler angles in radians, applied x, then y, then z.
pub fn rotation_from_euler(angles: [f64; 3]) -> Mat3 {
    Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).into_inner()
}

/// Angle of a rotation matrix (geodesic distance to the identity), radians.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Mean and principal axes of a point cloud.
#[derive(Clone, Debug)]
pub struct Principal {
    pub mean: Vec3,
    /// Eigenvalues in descending order.
    pub variances: Vec3,
    /// Columns are the unit eigenvectors matching `variances`.
    pub axes: Mat3,
}

/// Principal component analysis; fails when the covariance has rank < 3.
pub fn principal_axes(points: &[Vec3]) -> Result<Principal> {
    if points.len() < 4 {
        return Err(Error::Degenerate(format!("{} points", points.len())));
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let variances = Vec3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(variances.z > 1e-9 * variances.x.max(1e-300)) {
        return Err(Error::Degenerate(format!(
            "covariance rank < 3 (eigenvalues {:?})",
            variances.as_slice()
        )));
    }
    let axes = Mat3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    Ok(Principal {
        mean,
        variances,
        axes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_one_on_surface() {
        let r = rotation_from_euler([0.3, -0.2, 1.1]);
        let e = Ellipsoid::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(5.0, 3.0, 2.0), r).unwrap();
        let p = e.center + r * Vec3::new(0.0, 3.0, 0.0);
        assert!((e.quadratic_form(&p) - 1.0).abs() < 1e-12);
        assert!((e.radius_along(&(r * Vec3::x())) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Ellipsoid::axis_aligned(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0)).is_err());
        let mut m = Mat3::identity();
        m[(0, 1)] = 0.1;
        assert!(Ellipsoid::new(Vec3::zeros(), Vec3::repeat(1.0), m).is_err());
    }

    #[test]
    fn principal_axes_of_a_flat_cloud_fail() {
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64, (i * 7 % 5) as f64, 0.0)).collect();
        assert!(matches!(principal_axes(&pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn affine_inverse_round_trips() {
        let a = Affine {
            matrix: rotation_from_euler([0.1, 0.2, 0.3]) * Mat3::from_diagonal(&Vec3::new(1.2, 0.9, 1.1)),
            offset: Vec3::new(3.0, -2.0, 5.0),
        };
        let p = Vec3::new(1.0, 2.0, 3.0);
        let back = a.inverse().unwrap().apply(&a.apply(&p));
        assert!((back - p).norm() < 1e-12);
        assert!((a.compose(&a.inverse().unwrap()).apply(&p) - p).norm() < 1e-12);
    }

    #[test]
    fn rotation_angle_recovers_euler_magnitude() {
        let r = rotation_from_euler([0.25, 0.0, 0.0]);
        assert!((rotation_angle(&r) - 0.25).abs() < 1e-12);
    }
}

//! Transforms mapping subject (ultrasound) positions to atlas positions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_euler, Affine};
use crate::{Mat3, Vec3};

/// Rotation (Euler angles, radians) about a centre, then translation (mm).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidParams {
    pub fn matrix(&self) -> Mat3 {
        rotation_from_euler(self.rotation)
    }

    /// Parameters in optimizer units: degrees then millimetres.
    pub fn to_vector(&self) -> [f64; 6] {
        [
            self.rotation[0].to_degrees(),
            self.rotation[1].to_degrees(),
            self.rotation[2].to_degrees(),
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            rotation: [v[0].to_radians(), v[1].to_radians(), v[2].to_radians()],
            translation: [v[3], v[4], v[5]],
        }
    }

    /// Largest absolute angle in degrees and translation norm in mm.
    pub fn magnitude(&self) -> (f64, f64) {
        let angle = crate::geometry::rotation_angle(&self.matrix()).to_degrees();
        (angle, Vec3::from(self.translation).norm())
    }
}

/// Displacement field given on a regular control grid and interpolated
/// trilinearly; positions outside the grid use the nearest boundary cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeFormDeformation {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: Vec3,
    pub displacements: Vec<Vec3>,
}

impl FreeFormDeformation {
    /// Zero field with `dims` control points spanning `[lo, hi]`.
    pub fn zeros(lo: Vec3, hi: Vec3, dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument("control grid needs at least 2 points per axis".into()));
        }
        let mut spacing = Vec3::zeros();
        for a in 0..3 {
            spacing[a] = (hi[a] - lo[a]) / (dims[a] - 1) as f64;
            if !(spacing[a] > 0.0) {
                return Err(Error::InvalidArgument("control spacing must be positive".into()));
            }
        }
        Ok(Self {
            dims,
            origin: lo,
            spacing,
            displacements: vec![Vec3::zeros(); dims[0] * dims[1] * dims[2]],
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    #[inline]
    pub fn control_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn control_position(&self, idx: usize) -> Vec3 {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        self.origin + self.spacing.component_mul(&Vec3::new(i as f64, j as f64, k as f64))
    }

    #[inline]
    fn cell(&self, p: &Vec3, a: usize) -> (usize, f64) {
        let n = self.dims[a];
        let t = ((p[a] - self.origin[a]) / self.spacing[a]).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        (i, t - i as f64)
    }

    #[inline]
    pub fn displacement(&self, p: &Vec3) -> Vec3 {
        let (i, tx) = self.cell(p, 0);
        let (j, ty) = self.cell(p, 1);
        let (k, tz) = self.cell(p, 2);
        let mut out = Vec3::zeros();
        for (dk, wz) in [(0, 1.0 - tz), (1, tz)] {
            for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        out += self.displacements[self.control_index(i + di, j + dj, k + dk)] * w;
                    }
                }
            }
        }
        out
    }

    /// Interpolation weight of control point `idx` at `p`.
    #[inline]
    pub fn weight(&self, idx: usize, p: &Vec3) -> f64 {
        let c = [
            idx % self.dims[0],
            (idx / self.dims[0]) % self.dims[1],
            idx / (self.dims[0] * self.dims[1]),
        ];
        let mut w = 1.0;
        for (a, &ca) in c.iter().enumerate() {
            let (i, t) = self.cell(p, a);
            w *= if ca == i {
                1.0 - t
            } else if ca == i + 1 {
                t
            } else {
                return 0.0;
            };
        }
        w
    }

    /// World box outside which moving control point `idx` has no effect.
    /// Boundary control points also drive the clamped exterior, so their
    /// box is unbounded on that side.
    pub fn support(&self, idx: usize) -> (Vec3, Vec3) {
        let c = [
            idx % self.dims[0],
            (idx / self.dims[0]) % self.dims[1],
            idx / (self.dims[0] * self.dims[1]),
        ];
        let mut lo = Vec3::zeros();
        let mut hi = Vec3::zeros();
        for a in 0..3 {
            lo[a] = if c[a] == 0 {
                f64::NEG_INFINITY
            } else {
                self.origin[a] + (c[a] - 1) as f64 * self.spacing[a]
            };
            hi[a] = if c[a] + 1 == self.dims[a] {
                f64::INFINITY
            } else {
                self.origin[a] + (c[a] + 1) as f64 * self.spacing[a]
            };
        }
        (lo, hi)
    }

    /// The same field sampled on a control grid with `dims` points over the same box.
    pub fn resampled(&self, dims: [usize; 3]) -> Result<Self> {
        let hi = self.origin
            + self.spacing.component_mul(&Vec3::new(
                (self.dims[0] - 1) as f64,
                (self.dims[1] - 1) as f64,
                (self.dims[2] - 1) as f64,
            ));
        let mut out = Self::zeros(self.origin, hi, dims)?;
        for idx in 0..out.len() {
            let p = out.control_position(idx);
            out.displacements[idx] = self.displacement(&p);
        }
        Ok(out)
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.displacements.iter().flat_map(|d| [d.x, d.y, d.z]).collect()
    }

    pub fn set_from_vector(&mut self, v: &[f64]) {
        for (d, c) in self.displacements.iter_mut().zip(v.chunks_exact(3)) {
            *d = Vec3::new(c[0], c[1], c[2]);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.displacements.iter().map(|d| d.abs().max()).fold(0.0, f64::max)
    }
}

/// Composite map from subject space to atlas space:
/// `x ↦ alignment⁻¹(R·(x + u(x) − c) + c + t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    /// Atlas → subject initialization.
    pub alignment: Affine,
    pub rigid: RigidParams,
    pub rigid_center: Vec3,
    pub deformation: Option<FreeFormDeformation>,
    #[serde(skip)]
    cache: Option<TransformCache>,
}

#[derive(Clone, Debug, PartialEq)]
struct TransformCache {
    to_atlas: Affine,
}

impl Transform {
    pub fn new(alignment: Affine, rigid: RigidParams, rigid_center: Vec3) -> Result<Self> {
        let mut t = Self {
            alignment,
            rigid,
            rigid_center,
            deformation: None,
            cache: None,
        };
        t.refresh()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self::new(Affine::identity(), RigidParams::default(), Vec3::zeros()).expect("identity is invertible")
    }

    pub fn with_rigid(&self, rigid: RigidParams) -> Self {
        let mut t = self.clone();
        t.rigid = rigid;
        t.refresh().expect("alignment already validated");
        t
    }

    pub fn with_deformation(&self, ffd: Option<FreeFormDeformation>) -> Self {
        let mut t = self.clone();
        t.deformation = ffd;
        t
    }

    fn refresh(&mut self) -> Result<()> {
        // Rigid part folded into one affine map: subject → atlas.
        let r = self.rigid.matrix();
        let c = self.rigid_center;
        let rigid = Affine {
            matrix: r,
            offset: c + Vec3::from(self.rigid.translation) - r * c,
        };
        let to_atlas = self.alignment.inverse()?.compose(&rigid);
        self.cache = Some(TransformCache { to_atlas });
        Ok(())
    }

    /// Subject → atlas part after the deformation.
    pub fn affine_part(&self) -> Affine {
        match &self.cache {
            Some(c) => c.to_atlas,
            None => {
                let mut t = self.clone();
                t.refresh().expect("alignment already validated");
                t.cache.expect("refreshed").to_atlas
            }
        }
    }

    #[inline]
    pub fn map(&self, x: &Vec3) -> Vec3 {
        let a = self.cache.as_ref().map(|c| c.to_atlas).unwrap_or_else(|| self.affine_part());
        match &self.deformation {
            Some(f) => a.apply(&(x + f.displacement(x))),
            None => a.apply(x),
        }
    }

    /// Plain-text parameter list, one keyword per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.alignment.matrix;
        let o = &self.alignment.offset;
        let _ = writeln!(
            s,
            "alignment {} {} {} {} {} {} {} {} {} {} {} {}",
            m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)], o.x, o.y, o.z
        );
        let c = &self.rigid_center;
        let _ = writeln!(s, "rigid_center {} {} {}", c.x, c.y, c.z);
        let v = self.rigid.to_vector();
        let _ = writeln!(s, "rigid_deg_mm {} {} {} {} {} {}", v[0], v[1], v[2], v[3], v[4], v[5]);
        if let Some(f) = &self.deformation {
            let _ = writeln!(
                s,
                "ffd {} {} {} {} {} {} {} {} {}",
                f.dims[0], f.dims[1], f.dims[2], f.origin.x, f.origin.y, f.origin.z, f.spacing.x, f.spacing.y, f.spacing.z
            );
            for d in &f.displacements {
                let _ = writeln!(s, "{} {} {}", d.x, d.y, d.z);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("transform file: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |key: &str, n: usize| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{key}`")))?;
            let mut it = line.split_whitespace();
            if !key.is_empty() && it.next() != Some(key) {
                return Err(bad(&format!("expected `{key}`")));
            }
            let v: Vec<f64> = it
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad number"))?;
            if v.len() != n {
                return Err(bad(&format!("`{key}` needs {n} values")));
            }
            Ok(v)
        };
        let a = next("alignment", 12)?;
        let alignment = Affine {
            matrix: Mat3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            offset: Vec3::new(a[9], a[10], a[11]),
        };
        let c = next("rigid_center", 3)?;
        let r = next("rigid_deg_mm", 6)?;
        let mut t = Transform::new(alignment, RigidParams::from_vector(&r), Vec3::new(c[0], c[1], c[2]))?;
        if let Ok(h) = next("ffd", 9) {
            let dims = [h[0] as usize, h[1] as usize, h[2] as usize];
            let origin = Vec3::new(h[3], h[4], h[5]);
            let spacing = Vec3::new(h[6], h[7], h[8]);
            let hi = origin + spacing.component_mul(&Vec3::new((dims[0] - 1) as f64, (dims[1] - 1) as f64, (dims[2] - 1) as f64));
            let mut f = FreeFormDeformation::zeros(origin, hi, dims)?;
            f.spacing = spacing;
            for d in f.displacements.iter_mut() {
                let v = next("", 3)?;
                *d = Vec3::new(v[0], v[1], v[2]);
            }
            t.deformation = Some(f);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffd_interpolates_control_values() {
        let mut f = FreeFormDeformation::zeros(Vec3::zeros(), Vec3::new(10.0, 10.0, 10.0), [3, 3, 3]).unwrap();
        let idx = f.control_index(1, 1, 1);
        f.displacements[idx] = Vec3::new(2.0, 0.0, -1.0);
        assert_eq!(f.displacement(&Vec3::new(5.0, 5.0, 5.0)), Vec3::new(2.0, 0.0, -1.0));
        assert!((f.displacement(&Vec3::new(2.5, 5.0, 5.0)) - Vec3::new(1.0, 0.0, -0.5)).norm() < 1e-12);
        assert_eq!(f.displacement(&Vec3::new(0.0, 0.0, 0.0)), Vec3::zeros());
        let (lo, hi) = f.support(idx);
        assert_eq!((lo, hi), (Vec3::zeros(), Vec3::new(10.0, 10.0, 10.0)));
        // Coarse-to-fine resampling of a trilinear field that is linear per cell.
        let fine = f.resampled([5, 5, 5]).unwrap();
        for p in [Vec3::new(5.0, 5.0, 5.0), Vec3::new(2.5, 7.5, 5.0)] {
            assert!((fine.displacement(&p) - f.displacement(&p)).norm() < 1e-12);
        }
    }

    #[test]
    fn transform_text_round_trip() {
        let align = Affine {
            matrix: Mat3::from_diagonal(&Vec3::new(1.1, 0.9, 1.05)),
            offset: Vec3::new(1.0, 2.0, 3.0),
        };
        let rigid = RigidParams {
            rotation: [0.01, -0.02, 0.03],
            translation: [1.5, -0.5, 2.0],
        };
        let mut t = Transform::new(align, rigid, Vec3::new(50.0, 60.0, 70.0)).unwrap();
        let mut f = FreeFormDeformation::zeros(Vec3::zeros(), Vec3::repeat(100.0), [2, 3, 2]).unwrap();
        f.displacements[3] = Vec3::new(0.5, -0.25, 1.0);
        t = t.with_deformation(Some(f));
        let back = Transform::from_text(&t.to_text()).unwrap();
        let p = Vec3::new(40.0, 55.0, 61.0);
        assert!((back.map(&p) - t.map(&p)).norm() < 1e-9);
    }

    #[test]
    fn rigid_rotates_about_its_centre() {
        let c = Vec3::new(10.0, 20.0, 30.0);
        let t = Transform::new(
            Affine::identity(),
            RigidParams {
                rotation: [0.0, 0.0, 0.3],
                translation: [0.0; 3],
            },
            c,
        )
        .unwrap();
        assert!((t.map(&c) - c).norm() < 1e-12);
    }
}

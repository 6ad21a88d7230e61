//! Total brain volume from the skull seen in an ultrasound volume.
//!
//! Bright voxels inside a shell around a prior ellipsoid are taken as skull,
//! an ellipsoid is fitted to them, and a fixed fraction of its volume is
//! reported as brain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{principal_axes, Ellipsoid};
use crate::optim::{minimize_bounded, TrustRegionOptions};
use crate::volume::{LabelMap, Volume};
use crate::{Mat3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrainVolumeParams {
    /// Fraction of the ellipsoid volume that is brain.
    pub cf: f64,
    pub shell_lo: f64,
    pub shell_hi: f64,
    /// Skull intensity percentile, computed over non-zero voxels.
    pub percentile: f64,
    /// Relative height of the centre plane within the non-zero extent.
    pub z_center_level: f64,
    /// Extra detect-and-fit passes using the previous fit as prior.
    pub refine_passes: usize,
}

impl Default for BrainVolumeParams {
    fn default() -> Self {
        Self {
            cf: 0.95,
            shell_lo: 0.8,
            shell_hi: 1.3,
            percentile: 98.0,
            z_center_level: 0.65,
            refine_passes: 1,
        }
    }
}

impl BrainVolumeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cf > 0.0 && self.cf <= 1.0) {
            return Err(Error::InvalidArgument(format!("cf must lie in (0, 1], got {}", self.cf)));
        }
        if !(self.shell_lo < 1.0 && 1.0 < self.shell_hi && self.shell_lo >= 0.0) {
            return Err(Error::InvalidArgument("shell bounds must satisfy 0 <= lo < 1 < hi".into()));
        }
        if !(0.0..=100.0).contains(&self.percentile) || !(0.0..=1.0).contains(&self.z_center_level) {
            return Err(Error::InvalidArgument("percentile or centre level out of range".into()));
        }
        Ok(())
    }
}

/// Centre estimate: the plane at `level` of the non-zero height, and the
/// middle of the non-zero extent within that plane.
pub fn estimate_centroid_at(us: &Volume, level: f64) -> Result<Vec3> {
    let g = &us.grid;
    let [nx, ny, nz] = g.dims;
    let (mut kmin, mut kmax) = (usize::MAX, 0usize);
    for k in 0..nz {
        let slice = &us.data[nx * ny * k..nx * ny * (k + 1)];
        if slice.iter().any(|&v| v != 0.0) {
            kmin = kmin.min(k);
            kmax = kmax.max(k);
        }
    }
    if kmin == usize::MAX {
        return Err(Error::EmptyVolume);
    }
    let zmin = g.origin[2] + kmin as f64 * g.spacing[2];
    let zmax = g.origin[2] + kmax as f64 * g.spacing[2];
    let z = zmin + level * (zmax - zmin);
    let k = (((z - g.origin[2]) / g.spacing[2]).round() as usize).clamp(kmin, kmax);
    let (x0, x1, y0, y1) = slice_extent(us, k).ok_or(Error::EmptyVolume)?;
    Ok(Vec3::new(
        g.origin[0] + 0.5 * (x0 + x1) as f64 * g.spacing[0],
        g.origin[1] + 0.5 * (y0 + y1) as f64 * g.spacing[1],
        z,
    ))
}

pub fn estimate_centroid(us: &Volume) -> Result<Vec3> {
    estimate_centroid_at(us, BrainVolumeParams::default().z_center_level)
}

fn slice_extent(us: &Volume, k: usize) -> Option<(usize, usize, usize, usize)> {
    let [nx, ny, _] = us.grid.dims;
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for j in 0..ny {
        for i in 0..nx {
            if us.get(i, j, k) != 0.0 {
                ext = Some(match ext {
                    None => (i, i, j, j),
                    Some((a, b, c, d)) => (a.min(i), b.max(i), c.min(j), d.max(j)),
                });
            }
        }
    }
    ext
}

/// Axis-aligned prior around the centroid: half the non-zero extent of the
/// centre plane in x and y, and the distance from the centre to the top of
/// the non-zero region in z.
pub fn prior_ellipsoid(us: &Volume, p: &BrainVolumeParams) -> Result<Ellipsoid> {
    let c = estimate_centroid_at(us, p.z_center_level)?;
    let g = &us.grid;
    let k = ((c.z - g.origin[2]) / g.spacing[2]).round() as usize;
    let (x0, x1, y0, y1) = slice_extent(us, k).ok_or(Error::EmptyVolume)?;
    let [nx, ny, nz] = g.dims;
    let mut kmax = 0;
    for kk in 0..nz {
        if us.data[nx * ny * kk..nx * ny * (kk + 1)].iter().any(|&v| v != 0.0) {
            kmax = kk;
        }
    }
    let zmax = g.origin[2] + kmax as f64 * g.spacing[2];
    let axes = Vec3::new(
        0.5 * ((x1 - x0) as f64 + 1.0) * g.spacing[0],
        0.5 * ((y1 - y0) as f64 + 1.0) * g.spacing[1],
        (zmax - c.z + 0.5 * g.spacing[2]).max(g.spacing[2]),
    );
    Ellipsoid::axis_aligned(c, axes)
}

/// Skull candidates: strictly brighter than the intensity percentile and
/// inside the shell `shell_lo < q < shell_hi` of the prior's quadratic form.
pub fn detect_skull_voxels(us: &Volume, prior: &Ellipsoid, p: &BrainVolumeParams) -> Result<LabelMap> {
    let threshold = us.intensity_percentile(p.percentile, true)?;
    let g = us.grid;
    let mut data = vec![0u8; g.len()];
    let mut any = false;
    for (idx, d) in data.iter_mut().enumerate() {
        if (us.data[idx] as f64) > threshold {
            let q = prior.quadratic_form(&g.world_of_index(idx));
            if q > p.shell_lo && q < p.shell_hi {
                *d = 1;
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::NoSkullDetected);
    }
    LabelMap::new(g, data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EllipsoidFit {
    pub ellipsoid: Ellipsoid,
    /// Root mean square of (q - 1) over the fitted points.
    pub residual_rms: f64,
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 100;

pub fn fit_ellipsoid(skull: &LabelMap) -> Result<EllipsoidFit> {
    fit_ellipsoid_points(&skull.foreground_points())
}

/// Fit an ellipsoid in the principal frame of `points`, minimizing the mean
/// of (q - 1)² over centre and semi-axes.
pub fn fit_ellipsoid_points(points: &[Vec3]) -> Result<EllipsoidFit> {
    if points.len() < MIN_FIT_POINTS {
        return Err(Error::Degenerate(format!(
            "{} points, need at least {MIN_FIT_POINTS}",
            points.len()
        )));
    }
    let pca = principal_axes(points)?;
    let frame = canonical_frame(points, &pca.mean, &pca.axes);
    let local: Vec<Vec3> = points.iter().map(|p| frame.transpose() * (p - pca.mean)).collect();

    let (c0, a0) = algebraic_start(&local).unwrap_or_else(|| {
        let mut axes = Vec3::zeros();
        for k in 0..3 {
            axes[k] = (3.0 * pca.variances[k]).sqrt();
        }
        (Vec3::zeros(), axes)
    });

    let scale = a0.max();
    let objective = |x: &[f64]| mean_sq_residual(&local, &Vec3::new(x[0], x[1], x[2]), &Vec3::new(x[3], x[4], x[5]));
    let x0 = [c0.x, c0.y, c0.z, a0.x, a0.y, a0.z];
    let mut lower = [0.0; 6];
    let mut upper = [0.0; 6];
    for k in 0..3 {
        lower[k] = x0[k] - scale;
        upper[k] = x0[k] + scale;
        lower[k + 3] = 0.2 * a0[k];
        upper[k + 3] = 5.0 * a0[k];
    }
    let out = minimize_bounded(
        objective,
        &x0,
        &lower,
        &upper,
        &TrustRegionOptions {
            initial_radius: 0.02 * scale,
            final_radius: 1e-7 * scale,
            max_evaluations: 4000,
        },
    );
    let x = out.x;
    let center = pca.mean + frame * Vec3::new(x[0], x[1], x[2]);
    let axes = Vec3::new(x[3], x[4], x[5]);
    Ok(EllipsoidFit {
        ellipsoid: Ellipsoid::new(center, axes, frame)?,
        residual_rms: out.value.sqrt(),
        points: points.len(),
    })
}

fn mean_sq_residual(local: &[Vec3], c: &Vec3, a: &Vec3) -> f64 {
    let inv = Vec3::new(1.0 / (a.x * a.x), 1.0 / (a.y * a.y), 1.0 / (a.z * a.z));
    let mut acc = 0.0;
    for p in local {
        let d = p - c;
        let q = d.x * d.x * inv.x + d.y * d.y * inv.y + d.z * d.z * inv.z;
        acc += (q - 1.0) * (q - 1.0);
    }
    acc / local.len() as f64
}

/// Principal axes with signs fixed by the third moment along each axis,
/// then made right-handed.
fn canonical_frame(points: &[Vec3], mean: &Vec3, axes: &Mat3) -> Mat3 {
    let mut frame = *axes;
    for k in 0..3 {
        let axis = frame.column(k).into_owned();
        let skew: f64 = points.iter().map(|p| (p - mean).dot(&axis).powi(3)).sum();
        if skew < 0.0 {
            frame.set_column(k, &(-axis));
        }
    }
    if frame.determinant() < 0.0 {
        let c = frame.column(2).into_owned();
        frame.set_column(2, &(-c));
    }
    frame
}

/// Closed-form start: least squares on Σ Aₖxₖ² + Dₖxₖ = 1.
fn algebraic_start(local: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let mut ata = nalgebra::Matrix6::<f64>::zeros();
    let mut atb = nalgebra::Vector6::<f64>::zeros();
    for p in local {
        let row = nalgebra::Vector6::new(p.x * p.x, p.y * p.y, p.z * p.z, p.x, p.y, p.z);
        ata += row * row.transpose();
        atb += row;
    }
    let sol = ata.cholesky()?.solve(&atb);
    let a = Vec3::new(sol[0], sol[1], sol[2]);
    if a.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let center = Vec3::new(-sol[3] / (2.0 * a.x), -sol[4] / (2.0 * a.y), -sol[5] / (2.0 * a.z));
    let gain = 1.0 + (0..3).map(|k| sol[k + 3] * sol[k + 3] / (4.0 * a[k])).sum::<f64>();
    if gain <= 0.0 {
        return None;
    }
    let axes = Vec3::new((gain / a.x).sqrt(), (gain / a.y).sqrt(), (gain / a.z).sqrt());
    axes.iter().all(|v| v.is_finite()).then_some((center, axes))
}

/// (4/3)·π·a·b·c·cf.
pub fn brain_volume_from_ellipsoid(e: &Ellipsoid, cf: f64) -> f64 {
    e.volume() * cf
}

/// Every intermediate of a brain volume estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrainVolumeReport {
    pub centroid: Vec3,
    pub prior: Ellipsoid,
    pub skull_threshold: f64,
    /// Skull voxel count of each detection pass.
    pub skull_voxels: Vec<usize>,
    pub ellipsoid: Ellipsoid,
    pub residual_rms: f64,
    pub cf: f64,
    pub volume_mm3: f64,
}

/// Centroid, prior, skull detection, ellipsoid fit and scaled volume.
pub fn estimate_brain_volume(us: &Volume, p: &BrainVolumeParams) -> Result<(BrainVolumeReport, LabelMap)> {
    p.validate()?;
    let centroid = estimate_centroid_at(us, p.z_center_level)?;
    let prior = prior_ellipsoid(us, p)?;
    let mut skull = detect_skull_voxels(us, &prior, p)?;
    let mut counts = vec![skull.count()];
    let mut fit = fit_ellipsoid(&skull)?;
    for _ in 0..p.refine_passes {
        skull = detect_skull_voxels(us, &fit.ellipsoid, p)?;
        counts.push(skull.count());
        fit = fit_ellipsoid(&skull)?;
    }
    let report = BrainVolumeReport {
        centroid,
        prior,
        skull_threshold: us.intensity_percentile(p.percentile, true)?,
        skull_voxels: counts,
        volume_mm3: brain_volume_from_ellipsoid(&fit.ellipsoid, p.cf),
        ellipsoid: fit.ellipsoid,
        residual_rms: fit.residual_rms,
        cf: p.cf,
    };
    Ok((report, skull))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfCalibration {
    pub cf: f64,
    /// Leave-one-out absolute relative error of each pair.
    pub loo_errors: Vec<f64>,
    pub loo_mean: f64,
    pub loo_max: f64,
}

/// cf as the mean of true/ellipsoid volume ratios, with leave-one-out errors.
pub fn calibrate_cf(pairs: &[(Ellipsoid, f64)]) -> Result<CfCalibration> {
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(_, v)| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("true volumes must be positive".into()));
    }
    let ratios: Vec<f64> = pairs.iter().map(|(e, v)| v / e.volume()).collect();
    let n = ratios.len() as f64;
    let total: f64 = ratios.iter().sum();
    let loo_errors: Vec<f64> = pairs
        .iter()
        .zip(&ratios)
        .map(|((e, v), r)| {
            let cf_rest = (total - r) / (n - 1.0);
            (cf_rest * e.volume() - v).abs() / v
        })
        .collect();
    Ok(CfCalibration {
        cf: total / n,
        loo_mean: loo_errors.iter().sum::<f64>() / n,
        loo_max: loo_errors.iter().cloned().fold(0.0, f64::max),
        loo_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_euler;
    use crate::phantom::rasterize_ellipsoid_shell;
    use crate::volume::Grid;
    use std::f64::consts::PI;

    #[test]
    fn unit_sphere_volume() {
        let e = Ellipsoid::sphere(Vec3::zeros(), 1.0).unwrap();
        assert!((brain_volume_from_ellipsoid(&e, 1.0) - 4.188_790_204_786_391).abs() < 1e-12);
        assert_eq!(BrainVolumeParams::default().cf, 0.95);
        let e = Ellipsoid::axis_aligned(Vec3::zeros(), Vec3::new(60.0, 50.0, 45.0)).unwrap();
        let expected = 0.95 * (4.0 * PI / 3.0) * 135_000.0;
        assert!((brain_volume_from_ellipsoid(&e, 0.95) - expected).abs() < 1e-6);
    }

    #[test]
    fn centroid_plane_follows_the_height_level() {
        let g = Grid::new([5, 5, 101], [1.0; 3], [0.0; 3]).unwrap();
        let mut v = Volume::zeros(g);
        for k in 0..=100 {
            v.data[g.index(2, 2, k)] = 1.0;
        }
        let c = estimate_centroid(&v).unwrap();
        assert!((c.z - 65.0).abs() < 1e-12);
        assert_eq!((c.x, c.y), (2.0, 2.0));

        let mut single = Volume::zeros(g);
        single.data[g.index(1, 3, 40)] = 5.0;
        assert_eq!(estimate_centroid(&single).unwrap(), Vec3::new(1.0, 3.0, 40.0));
        assert!(matches!(estimate_centroid(&Volume::zeros(g)), Err(Error::EmptyVolume)));
    }

    #[test]
    fn uniform_image_has_no_skull() {
        let g = Grid::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(g, vec![7.0; 1000]).unwrap();
        let prior = Ellipsoid::sphere(Vec3::repeat(4.5), 4.0).unwrap();
        assert!(matches!(
            detect_skull_voxels(&v, &prior, &BrainVolumeParams::default()),
            Err(Error::NoSkullDetected)
        ));
    }

    fn shell_points(axes: Vec3, rotation: Mat3) -> Vec<Vec3> {
        let grid = Grid::new([96, 96, 96], [1.0; 3], [-47.7, -47.4, -47.2]).unwrap();
        let e = Ellipsoid::new(Vec3::new(0.3, -0.2, 0.1), axes, rotation).unwrap();
        // Thin shell of relative thickness ~1 voxel.
        let t = 1.0 / axes.min();
        rasterize_ellipsoid_shell(&e, (1.0 - t).powi(2), (1.0 + t).powi(2), &grid).foreground_points()
    }

    #[test]
    fn recovers_sphere_radius() {
        let fit = fit_ellipsoid_points(&shell_points(Vec3::repeat(20.0), Mat3::identity())).unwrap();
        for k in 0..3 {
            assert!((fit.ellipsoid.semi_axes[k] / 20.0 - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn recovers_anisotropic_axes() {
        let fit = fit_ellipsoid_points(&shell_points(Vec3::new(30.0, 25.0, 20.0), Mat3::identity())).unwrap();
        let a = fit.ellipsoid.semi_axes;
        for (got, want) in a.iter().zip([30.0, 25.0, 20.0]) {
            assert!((got / want - 1.0).abs() < 0.02, "{a:?}");
        }
    }

    #[test]
    fn fit_is_rotation_equivariant() {
        let pts = shell_points(Vec3::new(30.0, 25.0, 20.0), rotation_from_euler([0.2, 0.1, -0.3]));
        let r = rotation_from_euler([0.7, -0.4, 1.2]);
        let rotated: Vec<Vec3> = pts.iter().map(|p| r * p).collect();
        let f1 = fit_ellipsoid_points(&pts).unwrap();
        let f2 = fit_ellipsoid_points(&rotated).unwrap();
        for (p, q) in pts.iter().zip(&rotated) {
            let d = f1.ellipsoid.quadratic_form(p) - f2.ellipsoid.quadratic_form(q);
            assert!(d.abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn too_few_points_fail() {
        let pts: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64, (i * i) as f64, (i % 7) as f64)).collect();
        assert!(matches!(fit_ellipsoid_points(&pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn calibration_examples() {
        let e = Ellipsoid::axis_aligned(Vec3::zeros(), Vec3::new(60.0, 50.0, 45.0)).unwrap();
        let v = e.volume();
        let consistent: Vec<_> = (0..4).map(|_| (e.clone(), 0.95 * v)).collect();
        let c = calibrate_cf(&consistent).unwrap();
        assert!((c.cf - 0.95).abs() < 1e-12 && c.loo_max < 1e-12);

        let pairs = vec![(e.clone(), 0.9 * v), (e.clone(), 0.95 * v), (e.clone(), 1.0 * v)];
        let c = calibrate_cf(&pairs).unwrap();
        assert!((c.cf - 0.95).abs() < 1e-12);
        // Held-out pair i is predicted with the mean of the other two ratios.
        let expected = [(0.975 - 0.9) / 0.9, 0.0, (1.0 - 0.925) / 1.0];
        for (got, want) in c.loo_errors.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(calibrate_cf(&pairs[..2]).is_err());
    }
}

//! Synthetic head phantoms with known ground truth.
//!
//! A phantom is a pair of co-registered images (pseudo-ultrasound and
//! pseudo-MRI) generated from one analytic geometry: an ellipsoidal skull
//! whose mid-surface bounds the brain, an anterior-inferior cap removed from
//! the brain, and two curved lateral ventricles each holding a choroid
//! plexus. The ultrasound is restricted to an elliptic acquisition sector
//! whose apex sits on top of the skull, the way a fontanelle window sees the
//! head.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_euler, Ellipsoid};
use crate::volume::{save_label_map, save_volume, Grid, LabelMap, Volume};
use crate::{Mat3, Vec3};

pub const LABEL_LUMEN: u8 = 1;
pub const LABEL_PLEXUS: u8 = 2;

/// Ultrasound intensity anchors before speckle.
pub mod us_intensity {
    pub const LUMEN: f32 = 60.0;
    pub const WHITE_MATTER: f32 = 106.0;
    pub const GREY_MATTER: f32 = 94.0;
    pub const PLEXUS: f32 = 140.0;
    pub const NON_BRAIN: f32 = 75.0;
    pub const SKULL_EDGE: f32 = 180.0;
    pub const SKULL_PEAK: f32 = 255.0;
    /// Tissue level beyond the skull before the shadow factor is applied.
    pub const BEYOND_SKULL: f32 = 100.0;
}

/// MRI intensity anchors before noise.
pub mod mri_intensity {
    pub const BACKGROUND: f32 = 8.0;
    /// Cortical tables at the skull surfaces.
    pub const SKULL: f32 = 25.0;
    /// Marrow (diploë) at the skull mid-surface.
    pub const SKULL_DIPLOE: f32 = 75.0;
    pub const LUMEN: f32 = 20.0;
    pub const PLEXUS: f32 = 165.0;
    pub const GREY_MATTER: f32 = 95.0;
    pub const WHITE_MATTER: f32 = 130.0;
    pub const NON_BRAIN: f32 = 50.0;
}

/// Parameters of one phantom. Every field has a default, so a JSON spec
/// only needs the fields it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Lower and upper bounds of the skull mid-surface semi-axes (x: AP, y: LR, z: vertical).
    pub semi_axes_min: [f64; 3],
    pub semi_axes_max: [f64; 3],
    pub skull_thickness_mm: f64,
    /// Fraction of the skull ellipsoid occupied by brain.
    pub brain_fraction: f64,
    pub ventricle_scale: f64,
    /// Per-axis ventricle size jitter, relative.
    pub ventricle_jitter: f64,
    /// ≥ 1; scales ventricle semi-axes and their lateral offsets.
    pub ventricle_dilation: f64,
    /// Radius of a spherical outgrowth on top of each ventricle, mm (0 = none).
    pub ventricle_bulge_mm: f64,
    /// RMS radial displacement of the ventricle walls by random plane
    /// waves, mm; models subject-specific shape detail finer than the
    /// registration control grid.
    pub ventricle_ripple_mm: f64,
    /// Wavelength range of those waves, mm.
    pub ventricle_ripple_wavelength_mm: [f64; 2],
    /// Multiplicative speckle amplitude: intensities are scaled by U(1-a, 1+a).
    pub speckle: f64,
    /// Attenuation of tissue seen through the skull.
    pub shadow: f64,
    pub mri_noise_sd: f64,
    /// Relative widening of the acquisition sector beyond the skull at the head centre.
    pub sector_margin: f64,
    /// Imaged depth divided by the distance from the apex to the head centre.
    pub sector_depth_ratio: f64,
    /// Head orientation, Euler angles in degrees.
    pub head_rotation_deg: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [64, 64, 64],
            spacing: [2.4, 2.4, 2.4],
            semi_axes_min: [58.0, 50.0, 40.0],
            semi_axes_max: [66.0, 56.0, 46.0],
            skull_thickness_mm: 4.0,
            brain_fraction: 0.95,
            ventricle_scale: 1.0,
            ventricle_jitter: 0.15,
            ventricle_dilation: 1.0,
            ventricle_bulge_mm: 0.0,
            ventricle_ripple_mm: 1.5,
            ventricle_ripple_wavelength_mm: [10.0, 20.0],
            speckle: 0.1,
            shadow: 0.05,
            mri_noise_sd: 3.0,
            sector_margin: 0.03,
            sector_depth_ratio: 1.0 / 0.35,
            head_rotation_deg: [0.0; 3],
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// The same physical field of view sampled on a grid with `n` voxels per axis.
    pub fn resampled(mut self, n: usize) -> Self {
        for a in 0..3 {
            let extent = (self.dims[a] - 1) as f64 * self.spacing[a];
            self.dims[a] = n;
            self.spacing[a] = extent / (n - 1) as f64;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("phantom spec: {m}")));
        if self.dims.iter().any(|&d| d < 8) {
            return bad("dims must be at least 8 per axis");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive");
        }
        for a in 0..3 {
            if !(self.semi_axes_min[a] > 0.0) || self.semi_axes_min[a] > self.semi_axes_max[a] {
                return bad("semi-axis range must be positive and ordered");
            }
        }
        if !(self.ventricle_dilation >= 1.0) {
            return bad("ventricle dilation must be >= 1");
        }
        if !(self.ventricle_scale > 0.0) || !(0.0..0.5).contains(&self.ventricle_jitter) {
            return bad("ventricle scale must be positive and jitter in [0, 0.5)");
        }
        if !(0.0..1.0).contains(&self.speckle) || !(0.0..1.0).contains(&self.shadow) {
            return bad("speckle and shadow must lie in [0, 1)");
        }
        if !(self.brain_fraction > 0.5 && self.brain_fraction <= 1.0) {
            return bad("brain fraction must lie in (0.5, 1]");
        }
        if !(self.skull_thickness_mm > 0.0) || !(self.mri_noise_sd >= 0.0) {
            return bad("skull thickness must be positive and noise non-negative");
        }
        if !(self.sector_depth_ratio > 1.0) || !(self.sector_margin >= 0.0) {
            return bad("sector depth ratio must exceed 1 and margin be non-negative");
        }
        if !(self.ventricle_bulge_mm >= 0.0) {
            return bad("bulge radius must be non-negative");
        }
        let [w0, w1] = self.ventricle_ripple_wavelength_mm;
        if !(self.ventricle_ripple_mm >= 0.0) || !(w0 > 0.0 && w0 <= w1) {
            return bad("ripple amplitude must be non-negative and wavelengths positive and ordered");
        }
        // The largest admissible head has to fit with a two-voxel margin.
        let layout = Layout::new(self, Vec3::from(self.semi_axes_max))?;
        layout.check_fits(self)
    }
}

/// Ground truth written next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub seed: u64,
    pub ellipsoid: Ellipsoid,
    pub brain_fraction: f64,
    pub brain_volume_mm3: f64,
    pub ventricle_volume_mm3: f64,
    pub lumen_volume_mm3: f64,
    pub plexus_volume_mm3: f64,
    pub ratio: f64,
    pub skull_thickness_mm: f64,
    /// World position of the acquisition apex.
    pub apex: Vec3,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub us: Volume,
    pub mri: Volume,
    /// 0 background, 1 lumen, 2 plexus.
    pub truth_ventricles: LabelMap,
    pub truth_brain: LabelMap,
    pub truth_ellipsoid: Ellipsoid,
    pub truth_brain_volume: f64,
    pub apex: Vec3,
}

impl Phantom {
    pub fn truth(&self) -> PhantomTruth {
        let vv = self.truth_ventricles.volume_mm3();
        let voxel = self.truth_ventricles.grid.voxel_volume();
        let count = |l: u8| self.truth_ventricles.data.iter().filter(|&&v| v == l).count() as f64 * voxel;
        PhantomTruth {
            seed: self.spec.seed,
            ellipsoid: self.truth_ellipsoid.clone(),
            brain_fraction: self.spec.brain_fraction,
            brain_volume_mm3: self.truth_brain_volume,
            ventricle_volume_mm3: vv,
            lumen_volume_mm3: count(LABEL_LUMEN),
            plexus_volume_mm3: count(LABEL_PLEXUS),
            ratio: vv / self.truth_brain_volume,
            skull_thickness_mm: self.spec.skull_thickness_mm,
            apex: self.apex,
        }
    }

    /// Write `us.mhd`, `mri.mhd`, `truth_ventricles.mhd`, `truth_brain.mhd`,
    /// `truth.json` and `spec.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_volume(&self.us, dir.join("us.mhd"))?;
        save_volume(&self.mri, dir.join("mri.mhd"))?;
        save_label_map(&self.truth_ventricles, dir.join("truth_ventricles.mhd"))?;
        save_label_map(&self.truth_brain, dir.join("truth_brain.mhd"))?;
        write_json(&self.truth(), &dir.join("truth.json"))?;
        write_json(&self.spec, &dir.join("spec.json"))
    }
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Where the head sits in the grid.
struct Layout {
    semi_axes: Vec3,
    center: Vec3,
    rotation: Mat3,
    /// Apex in head-local coordinates.
    apex_local: Vec3,
    depth: f64,
    /// Tangents of the sector half-angles along local x and y.
    tan_x: f64,
    tan_y: f64,
}

impl Layout {
    fn new(spec: &PhantomSpec, semi_axes: Vec3) -> Result<Self> {
        let grid = Grid::new(spec.dims, spec.spacing, [0.0; 3])?;
        let half_t = 0.5 * spec.skull_thickness_mm;
        let reach = semi_axes.z + half_t;
        let depth = reach * spec.sector_depth_ratio;
        let rotation = rotation_from_euler(spec.head_rotation_deg.map(f64::to_radians));
        // Sector bottom two voxels above the grid floor; head centre `reach`
        // below the apex.
        let bottom = 2.0 * spec.spacing[2];
        let gc = grid.center();
        let center = Vec3::new(gc.x, gc.y, bottom + depth - reach);
        Ok(Self {
            semi_axes,
            center,
            rotation,
            apex_local: Vec3::new(0.0, 0.0, reach),
            depth,
            tan_x: (semi_axes.x + half_t) * (1.0 + spec.sector_margin) / reach,
            tan_y: (semi_axes.y + half_t) * (1.0 + spec.sector_margin) / reach,
        })
    }

    fn check_fits(&self, spec: &PhantomSpec) -> Result<()> {
        let half_t = 0.5 * spec.skull_thickness_mm;
        for a in 0..3 {
            let extent = (spec.dims[a] - 1) as f64 * spec.spacing[a];
            let margin = 2.0 * spec.spacing[a];
            let r = (0..3)
                .map(|j| (self.rotation[(a, j)] * (self.semi_axes[j] + half_t)).powi(2))
                .sum::<f64>()
                .sqrt();
            let top = if a == 2 {
                (self.center + self.rotation * self.apex_local)[a]
            } else {
                self.center[a] + r
            };
            if self.center[a] - r < margin || top.max(self.center[a] + r) > extent - margin {
                return Err(Error::InvalidArgument(format!(
                    "phantom spec: head does not fit the grid along axis {a} with a two-voxel margin"
                )));
            }
        }
        Ok(())
    }

    fn inside_sector(&self, local: &Vec3) -> bool {
        let d = self.apex_local.z - local.z;
        if d <= 0.0 || d > self.depth {
            return false;
        }
        (local.x / (d * self.tan_x)).powi(2) + (local.y / (d * self.tan_y)).powi(2) <= 1.0
    }
}

/// One curved lateral ventricle in head-local coordinates.
#[derive(Clone, Debug)]
struct Ventricle {
    center: Vec3,
    semi_axes: Vec3,
    curvature: f64,
    plexus_center: Vec3,
    plexus_axes: Vec3,
    bulge: Option<(Vec3, f64)>,
    /// Wave vectors (rad/mm) and phases of the wall ripple.
    ripples: Vec<(Vec3, f64)>,
    /// Amplitude of each ripple term, mm.
    ripple_amplitude: f64,
}

impl Ventricle {
    fn bent(&self, p: &Vec3) -> Vec3 {
        let u = p - self.center;
        let s = u.x / self.semi_axes.x;
        Vec3::new(u.x, u.y, u.z - self.curvature * s * s * self.semi_axes.z)
    }

    /// Outward wall displacement at `p`, mm.
    fn ripple(&self, p: &Vec3) -> f64 {
        let u = p - self.center;
        self.ripples.iter().map(|(w, phase)| (w.dot(&u) + phase).sin()).sum::<f64>() * self.ripple_amplitude
    }

    fn contains(&self, p: &Vec3) -> bool {
        let u = self.bent(p);
        let r = ((u.x / self.semi_axes.x).powi(2)
            + (u.y / self.semi_axes.y).powi(2)
            + (u.z / self.semi_axes.z).powi(2))
        .sqrt();
        // Radial distance to the wall is about (r − 1)·|u|/r; the ripple
        // moves the wall outward by `ripple` mm.
        let inside = if self.ripples.is_empty() || r == 0.0 {
            r < 1.0
        } else {
            (r - 1.0) * u.norm() / r < self.ripple(p)
        };
        if inside {
            return true;
        }
        match self.bulge {
            Some((c, r)) => (p - c).norm_squared() < r * r,
            None => false,
        }
    }

    fn in_plexus(&self, p: &Vec3) -> bool {
        let u = self.bent(p) - (self.plexus_center - self.center);
        (u.x / self.plexus_axes.x).powi(2) + (u.y / self.plexus_axes.y).powi(2) + (u.z / self.plexus_axes.z).powi(2)
            < 1.0
    }
}

/// Height of the spherical cap of the unit ball holding `fraction` of its volume.
fn cap_height(fraction: f64) -> f64 {
    if fraction <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 2.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid * mid * (3.0 - mid) / 4.0 < fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Tissue class of a head-local point, before intensities are assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Outside,
    /// Skull band with relative distance from the band centre in [0, 1).
    Skull,
    NonBrain,
    Lumen,
    Plexus,
    WhiteMatter,
    GreyMatter,
}

/// Generate a phantom. Pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = Grid::new(spec.dims, spec.spacing, [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut axes = Vec3::zeros();
    for a in 0..3 {
        axes[a] = if spec.semi_axes_max[a] > spec.semi_axes_min[a] {
            rng.random_range(spec.semi_axes_min[a]..spec.semi_axes_max[a])
        } else {
            spec.semi_axes_min[a]
        };
    }
    let layout = Layout::new(spec, axes)?;
    layout.check_fits(spec)?;
    let ventricles = draw_ventricles(&mut rng, spec);

    let half_t = 0.5 * spec.skull_thickness_mm;
    let cap_h = cap_height(1.0 - spec.brain_fraction);
    let cap_dir = Vec3::new(1.0, 0.0, -1.0).normalize();

    let n = grid.len();
    let mut tissue = vec![Tissue::Outside; n];
    let mut skull_rel = vec![0.0f32; n];
    let mut sector = vec![false; n];
    let mut brain = vec![0u8; n];
    let mut vent = vec![0u8; n];
    for idx in 0..n {
        let p = grid.world_of_index(idx);
        let local = layout.rotation.transpose() * (p - layout.center);
        sector[idx] = layout.inside_sector(&local);
        let s = Vec3::new(local.x / axes.x, local.y / axes.y, local.z / axes.z);
        let q = s.norm_squared();
        let r = q.sqrt();
        let dist = if r > 0.0 { (r - 1.0) * local.norm() / r } else { f64::NEG_INFINITY };
        let in_brain = q < 1.0 && (cap_h <= 0.0 || s.dot(&cap_dir) <= 1.0 - cap_h);
        if in_brain {
            brain[idx] = 1;
            for v in &ventricles {
                if v.contains(&local) {
                    vent[idx] = if v.in_plexus(&local) { LABEL_PLEXUS } else { LABEL_LUMEN };
                    break;
                }
            }
        }
        tissue[idx] = if dist.abs() < half_t {
            skull_rel[idx] = (dist.abs() / half_t) as f32;
            Tissue::Skull
        } else if q >= 1.0 {
            Tissue::Outside
        } else if !in_brain {
            Tissue::NonBrain
        } else if vent[idx] == LABEL_LUMEN {
            Tissue::Lumen
        } else if vent[idx] == LABEL_PLEXUS {
            Tissue::Plexus
        } else if q < 0.49 {
            Tissue::WhiteMatter
        } else {
            Tissue::GreyMatter
        };
    }

    // Independent noise streams so geometry draws never shift the noise.
    let mut speckle_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    speckle_rng.set_stream(1);
    let mut mri_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    mri_rng.set_stream(2);
    let normal = Normal::new(0.0, spec.mri_noise_sd.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut us = vec![0.0f32; n];
    let mut mri = vec![0.0f32; n];
    for idx in 0..n {
        let speckle: f64 = if spec.speckle > 0.0 {
            speckle_rng.random_range(1.0 - spec.speckle..1.0 + spec.speckle)
        } else {
            1.0
        };
        let noise: f64 = if spec.mri_noise_sd > 0.0 { normal.sample(&mut mri_rng) } else { 0.0 };
        use mri_intensity as m;
        use us_intensity as u;
        let (us_base, mri_base) = match tissue[idx] {
            Tissue::Outside => (u::BEYOND_SKULL * (1.0 - spec.shadow as f32), m::BACKGROUND),
            Tissue::Skull => (
                u::SKULL_EDGE + (u::SKULL_PEAK - u::SKULL_EDGE) * (1.0 - skull_rel[idx]),
                m::SKULL + (m::SKULL_DIPLOE - m::SKULL) * (1.0 - skull_rel[idx]),
            ),
            Tissue::NonBrain => (u::NON_BRAIN, m::NON_BRAIN),
            Tissue::Lumen => (u::LUMEN, m::LUMEN),
            Tissue::Plexus => (u::PLEXUS, m::PLEXUS),
            Tissue::WhiteMatter => (u::WHITE_MATTER, m::WHITE_MATTER),
            Tissue::GreyMatter => (u::GREY_MATTER, m::GREY_MATTER),
        };
        if sector[idx] {
            us[idx] = (us_base as f64 * speckle) as f32;
        }
        mri[idx] = (mri_base as f64 + noise) as f32;
    }

    let truth_brain = LabelMap::new(grid, brain)?;
    let truth_brain_volume = truth_brain.volume_mm3();
    Ok(Phantom {
        spec: spec.clone(),
        us: Volume::new(grid, us)?,
        mri: Volume::new(grid, mri)?,
        truth_ventricles: LabelMap::new(grid, vent)?,
        truth_brain,
        truth_ellipsoid: Ellipsoid::new(layout.center, axes, layout.rotation)?,
        truth_brain_volume,
        apex: layout.center + layout.rotation * layout.apex_local,
    })
}


fn draw_ventricles(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> Vec<Ventricle> {
    const BASE_AXES: [f64; 3] = [22.0, 7.0, 8.0];
    const SEPTUM_GAP: f64 = 2.0;
    const RIPPLE_TERMS: usize = 8;
    // Own stream so the ripple never shifts the other geometry draws.
    let mut ripple_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ripple_rng.set_stream(3);
    let j = spec.ventricle_jitter;
    let d = spec.ventricle_dilation;
    let mut out = Vec::with_capacity(2);
    for side in [-1.0f64, 1.0] {
        let mut axes = Vec3::zeros();
        for a in 0..3 {
            let jitter = if j > 0.0 { rng.random_range(1.0 - j..1.0 + j) } else { 1.0 };
            axes[a] = BASE_AXES[a] * spec.ventricle_scale * jitter;
        }
        let cx = rng.random_range(-3.0..3.0);
        let cz = rng.random_range(1.0..5.0);
        let curvature = rng.random_range(0.3..0.7);
        let axes = axes * d;
        let center = Vec3::new(cx * d, side * (axes.y + SEPTUM_GAP), cz * d);
        let plexus_center = center + Vec3::new(-0.45 * axes.x, 0.0, -0.35 * axes.z);
        let plexus_axes = Vec3::new(0.35 * axes.x, 0.6 * axes.y, 0.45 * axes.z);
        let bulge = (spec.ventricle_bulge_mm > 0.0).then(|| {
            // Sphere centred on the upper surface, a third of the way forward.
            let s = 0.3f64;
            let top = axes.z * (1.0 - s * s).sqrt() + curvature * s * s * axes.z;
            (center + Vec3::new(s * axes.x, 0.0, top), spec.ventricle_bulge_mm)
        });
        // Dilation scales the ripple with the rest of the shape.
        let [w0, w1] = spec.ventricle_ripple_wavelength_mm;
        let ripples = if spec.ventricle_ripple_mm > 0.0 {
            (0..RIPPLE_TERMS)
                .map(|_| {
                    let dir: Vec3 = loop {
                        let v = Vec3::from_fn(|_, _| ripple_rng.random_range(-1.0..1.0));
                        let n = v.norm();
                        if n > 1e-3 && n <= 1.0 {
                            break v / n;
                        }
                    };
                    let wavelength = if w1 > w0 { ripple_rng.random_range(w0..w1) } else { w0 } * d;
                    let phase = ripple_rng.random_range(0.0..std::f64::consts::TAU);
                    (dir * (std::f64::consts::TAU / wavelength), phase)
                })
                .collect()
        } else {
            Vec::new()
        };
        out.push(Ventricle {
            center,
            semi_axes: axes,
            curvature,
            plexus_center,
            plexus_axes,
            bulge,
            ripples,
            // Sum of RIPPLE_TERMS unit sines has RMS sqrt(RIPPLE_TERMS / 2).
            ripple_amplitude: spec.ventricle_ripple_mm * d * (2.0 / RIPPLE_TERMS as f64).sqrt(),
        });
    }
    out
}

/// Label voxels whose normalized quadratic form with respect to `e` lies
/// strictly inside `(inner, outer)`.
pub fn rasterize_ellipsoid_shell(e: &Ellipsoid, inner: f64, outer: f64, grid: &Grid) -> LabelMap {
    LabelMap::from_fn(*grid, |p| {
        let q = e.quadratic_form(p);
        q > inner && q < outer
    })
}

/// Generate `count` phantoms with consecutive seeds starting at `first_seed`.
pub fn phantom_bank(base: &PhantomSpec, first_seed: u64, count: usize) -> Result<Vec<Phantom>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            generate_phantom(&PhantomSpec {
                seed: first_seed + i,
                ..base.clone()
            })
        })
        .collect()
}

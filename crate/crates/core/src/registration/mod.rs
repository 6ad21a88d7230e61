//! Atlas MRI → subject ultrasound registration: a rigid stage maximizing
//! LC², then a free-form stage maximizing LC² plus the adjusted P term.

mod field;
pub mod lc2;
pub mod pterm;
pub mod transform;
mod warp;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Affine, Ellipsoid};
use crate::optim::{minimize_bounded, Objective, TrustRegionOptions};
use crate::volume::{LabelMap, Region, Volume};
use crate::Vec3;

pub use field::{PTermSetup, ScoreParts};
pub use lc2::Lc2Params;
pub use pterm::{p_adjust, p_term, EpsilonRule, PTermParams};
pub use transform::{FreeFormDeformation, RigidParams, Transform};
pub use warp::warp_label;

use field::{Field, Incremental, State};
use lc2::{aggregate, patch_terms, PatchLayout, PatchTerms};

/// Standard deviation of the Gaussian applied to atlas MRIs before LC², mm.
/// Piecewise-constant images otherwise score higher off the voxel nodes,
/// where trilinear interpolation blurs them, than on them.
pub const MRI_SMOOTHING_MM: f64 = 2.0;

/// One atlas of the bank: MRI, the smoothed MRI and gradient magnitude used
/// by LC², the ventricle label (lumen and plexus sub-labels when available)
/// and the brain ellipsoid used for initialization.
#[derive(Clone, Debug)]
pub struct AtlasEntry {
    pub id: String,
    pub mri: Volume,
    pub moving: Volume,
    pub gradient: Volume,
    pub label: LabelMap,
    pub brain: Ellipsoid,
}

impl AtlasEntry {
    pub fn new(id: impl Into<String>, mri: Volume, label: LabelMap, brain: Ellipsoid) -> Result<Self> {
        if mri.grid != label.grid {
            return Err(Error::GridMismatch("atlas label must share the MRI grid".into()));
        }
        if label.count() == 0 {
            return Err(Error::EmptyLabel);
        }
        let moving = mri.gaussian_smoothed(MRI_SMOOTHING_MM);
        let gradient = moving.gradient_magnitude()?;
        Ok(Self {
            id: id.into(),
            mri,
            moving,
            gradient,
            label,
            brain,
        })
    }

    /// Atlas built from a phantom's MRI, ventricle truth and brain ellipsoid.
    pub fn from_phantom(id: impl Into<String>, phantom: &crate::phantom::Phantom) -> Result<Self> {
        Self::new(
            id,
            phantom.mri.clone(),
            phantom.truth_ventricles.clone(),
            phantom.truth_ellipsoid.clone(),
        )
    }

    pub fn epsilon_rule(&self) -> EpsilonRule {
        EpsilonRule::for_label(&self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidOptions {
    pub bound_deg: f64,
    pub bound_mm: f64,
    /// Starting trust-region radius, degrees and millimetres.
    pub initial_radius: f64,
    pub final_radius: f64,
    pub evaluations_per_parameter: usize,
    /// Margin around the initially aligned ventricles defining the region scored.
    pub roi_margin_mm: f64,
}

impl Default for RigidOptions {
    fn default() -> Self {
        Self {
            bound_deg: 20.0,
            bound_mm: 20.0,
            initial_radius: 3.0,
            final_radius: 1e-3,
            evaluations_per_parameter: 75,
            roi_margin_mm: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonrigidOptions {
    pub coarse_dims: [usize; 3],
    pub dims: [usize; 3],
    pub bound_mm: f64,
    pub initial_radius: f64,
    pub final_radius: f64,
    /// Evaluation budget of each sweep, per parameter of that sweep.
    pub evaluations_per_parameter: usize,
    pub roi_margin_mm: f64,
}

impl Default for NonrigidOptions {
    fn default() -> Self {
        Self {
            coarse_dims: [4; 3],
            dims: [6; 3],
            bound_mm: 10.0,
            initial_radius: 2.0,
            final_radius: 0.05,
            evaluations_per_parameter: 75,
            roi_margin_mm: 15.0,
        }
    }
}

impl NonrigidOptions {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_dims.iter().chain(self.dims.iter()).any(|&d| d < 2) {
            return Err(Error::InvalidArgument("control grids need at least 2 points per axis".into()));
        }
        if !(self.bound_mm > 0.0) || !(self.roi_margin_mm > 0.0) {
            return Err(Error::InvalidArgument("displacement bound and margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RigidResult {
    pub params: RigidParams,
    pub transform: Transform,
    pub region: Region,
    pub initial_lc2: f64,
    pub lc2: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// LC² at every accepted iterate.
    pub accepted: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NonrigidResult {
    pub transform: Transform,
    pub region: Region,
    pub initial: ScoreParts,
    pub score: ScoreParts,
    pub evaluations: usize,
    pub warped_label: LabelMap,
}

/// Region of `us` covering the ventricles of `atlas` mapped by `alignment`
/// (atlas → subject), grown by `margin_mm`.
pub fn atlas_region(us: &Volume, atlas: &AtlasEntry, alignment: &Affine, margin_mm: f64) -> Result<Region> {
    let pts: Vec<Vec3> = atlas.label.foreground_points().iter().map(|p| alignment.apply(p)).collect();
    Region::around_points(&us.grid, &pts, margin_mm).ok_or(Error::EmptyOverlap)
}

fn region_center(us: &Volume, r: &Region) -> Vec3 {
    let lo = us.grid.world(r.lo[0], r.lo[1], r.lo[2]);
    let hi = us.grid.world(r.hi[0] - 1, r.hi[1] - 1, r.hi[2] - 1);
    (lo + hi) * 0.5
}

/// Bounded derivative-free maximization of LC² over a rigid motion
/// (applied in subject space about the centre of the scored region).
pub fn register_rigid(
    us: &Volume,
    atlas: &AtlasEntry,
    alignment: &Affine,
    init: RigidParams,
    opts: &RigidOptions,
    lc2: &Lc2Params,
) -> Result<RigidResult> {
    lc2.validate()?;
    let region = atlas_region(us, atlas, alignment, opts.roi_margin_mm)?;
    let base = Transform::new(*alignment, init, region_center(us, &region))?;
    let field = Field::new(us, atlas, region, lc2, None);
    let st = field.state(&base);
    if st.total_weight() <= 0.0 {
        return Err(Error::EmptyOverlap);
    }
    let initial = field.score(&st);
    let x0 = init.to_vector();
    let mut lower = [0.0; 6];
    let mut upper = [0.0; 6];
    for i in 0..6 {
        let b = if i < 3 { opts.bound_deg } else { opts.bound_mm };
        lower[i] = x0[i] - b;
        upper[i] = x0[i] + b;
    }
    let objective = |x: &[f64]| -> f64 {
        let t = base.with_rigid(RigidParams::from_vector(x));
        -field.score(&field.state(&t)).lc2
    };
    let out = minimize_bounded(
        objective,
        &x0,
        &lower,
        &upper,
        &TrustRegionOptions {
            initial_radius: opts.initial_radius,
            final_radius: opts.final_radius,
            max_evaluations: opts.evaluations_per_parameter * 6,
        },
    );
    let params = RigidParams::from_vector(&out.x);
    let transform = base.with_rigid(params);
    let lc2_final = -out.value;
    debug!(
        "rigid {}: LC² {:.4} -> {:.4} in {} evaluations",
        atlas.id, initial.lc2, lc2_final, out.evaluations
    );
    Ok(RigidResult {
        params,
        transform,
        region,
        initial_lc2: initial.lc2,
        lc2: lc2_final,
        evaluations: out.evaluations,
        converged: out.converged,
        accepted: out.accepted.iter().map(|v| -v).collect(),
    })
}

struct NonrigidObjective<'f, 'a> {
    field: &'f Field<'a>,
    base: Transform,
    ffd: FreeFormDeformation,
    center: State,
    inc: Incremental,
}

impl NonrigidObjective<'_, '_> {
    fn transform_at(&self, x: &[f64]) -> Transform {
        let mut f = self.ffd.clone();
        f.set_from_vector(x);
        self.base.with_deformation(Some(f))
    }
}

impl Objective for NonrigidObjective<'_, '_> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        let t = self.transform_at(x);
        -self.field.score(&self.field.state(&t)).total
    }

    fn eval_coordinate(&mut self, center: &[f64], i: usize, value: f64) -> f64 {
        let affine = self.field.index_affine(&self.base);
        -self
            .inc
            .rescore(self.field, &self.center, &self.ffd, &affine, i / 3, i % 3, value - center[i])
            .total
    }

    fn set_center(&mut self, center: &[f64]) {
        self.ffd.set_from_vector(center);
        let t = self.base.with_deformation(Some(self.ffd.clone()));
        self.center = self.field.state(&t);
    }
}

/// Free-form refinement of a rigidly registered atlas. With `p` set the
/// objective is LC² + P_adj, otherwise LC² alone.
pub fn register_nonrigid(
    us: &Volume,
    atlas: &AtlasEntry,
    rigid: &Transform,
    p: Option<PTermSetup>,
    opts: &NonrigidOptions,
    lc2: &Lc2Params,
) -> Result<NonrigidResult> {
    lc2.validate()?;
    opts.validate()?;
    if let Some(p) = &p {
        p.params.validate()?;
        if !(p.mean_label_volume > 0.0) {
            return Err(Error::InvalidArgument("mean label volume must be positive".into()));
        }
    }
    let base = rigid.with_deformation(None);
    let warped = warp_label(&atlas.label, &base, &us.grid);
    let region = Region::around_points(&us.grid, &warped.foreground_points(), opts.roi_margin_mm).ok_or(Error::EmptyLabel)?;
    let field = Field::new(us, atlas, region, lc2, p);
    let lo = us.grid.world(region.lo[0], region.lo[1], region.lo[2]);
    let hi = us.grid.world(region.hi[0] - 1, region.hi[1] - 1, region.hi[2] - 1);

    let initial_state = field.state(&base);
    let initial = field.score(&initial_state);
    if initial_state.total_weight() <= 0.0 {
        return Err(Error::EmptyOverlap);
    }
    let mut ffd = FreeFormDeformation::zeros(lo, hi, opts.coarse_dims)?;
    let mut evaluations = 0;
    for (sweep, dims) in [opts.coarse_dims, opts.dims].into_iter().enumerate() {
        if sweep > 0 {
            if dims == ffd.dims {
                continue;
            }
            ffd = ffd.resampled(dims)?;
        }
        let x0 = ffd.to_vector();
        let n = x0.len();
        let lower = vec![-opts.bound_mm; n];
        let upper = vec![opts.bound_mm; n];
        let t0 = base.with_deformation(Some(ffd.clone()));
        let objective = NonrigidObjective {
            field: &field,
            base: base.clone(),
            ffd: ffd.clone(),
            center: field.state(&t0),
            inc: Incremental::new(&field),
        };
        let out = minimize_bounded(
            objective,
            &x0,
            &lower,
            &upper,
            &TrustRegionOptions {
                initial_radius: opts.initial_radius,
                final_radius: opts.final_radius,
                max_evaluations: opts.evaluations_per_parameter * n,
            },
        );
        evaluations += out.evaluations;
        ffd.set_from_vector(&out.x);
        debug!(
            "non-rigid {} sweep {}: {:.4} -> {:.4} in {} evaluations",
            atlas.id, sweep, -out.initial_value, -out.value, out.evaluations
        );
    }
    let mut transform = base.with_deformation(Some(ffd));
    let mut final_state = field.state(&transform);
    let mut score = field.score(&final_state);
    if score.total < initial.total {
        transform = base.clone();
        final_state = initial_state;
        score = initial;
    }
    let mut warped_label = LabelMap::empty(us.grid);
    let labels = field.labels(&final_state);
    let [ex, ey, _] = region.extent();
    for (v, &l) in labels.iter().enumerate() {
        let (i, j, k) = (v % ex, (v / ex) % ey, v / (ex * ey));
        let idx = us.grid.index(region.lo[0] + i, region.lo[1] + j, region.lo[2] + k);
        warped_label.data[idx] = l;
    }
    Ok(NonrigidResult {
        transform,
        region,
        initial,
        score,
        evaluations,
        warped_label,
    })
}

/// LC² of `us` against `mri` seen through `transform`, over `region`
/// (the whole ultrasound grid when `None`). Ultrasound voxels equal to zero
/// lie outside the acquisition and are ignored, as are voxels that map
/// outside the MRI.
pub fn lc2_metric(us: &Volume, mri: &Volume, transform: &Transform, params: &Lc2Params, region: Option<Region>) -> Result<f64> {
    let terms = lc2_patch_scores(us, mri, transform, params, region)?;
    aggregate(&terms.iter().map(|(_, t)| *t).collect::<Vec<_>>())
}

/// Per-patch `(centre voxel, terms)` for [`lc2_metric`].
pub fn lc2_patch_scores(
    us: &Volume,
    mri: &Volume,
    transform: &Transform,
    params: &Lc2Params,
    region: Option<Region>,
) -> Result<Vec<([usize; 3], PatchTerms)>> {
    params.validate()?;
    let region = region.unwrap_or_else(|| us.grid.full_region());
    let gradient = mri.gradient_magnitude()?;
    let mut u = Vec::with_capacity(region.len());
    let mut m = Vec::with_capacity(region.len());
    let mut g = Vec::with_capacity(region.len());
    let mut valid = Vec::with_capacity(region.len());
    for k in region.lo[2]..region.hi[2] {
        for j in region.lo[1]..region.hi[1] {
            for i in region.lo[0]..region.hi[0] {
                let uv = us.get(i, j, k) as f64;
                let y = transform.map(&us.grid.world(i, j, k));
                let s = match (mri.sample(&y), gradient.sample(&y)) {
                    (Some(a), Some(b)) if uv != 0.0 => Some((a, b)),
                    _ => None,
                };
                u.push(uv);
                m.push(s.map_or(0.0, |s| s.0));
                g.push(s.map_or(0.0, |s| s.1));
                valid.push(s.is_some());
            }
        }
    }
    let layout = PatchLayout::new(region, params.patch_radius, params.stride);
    let (lo, hi) = us.min_max();
    let floor = lc2::variance_floor(params, hi - lo);
    let min_count = layout.min_count(params.min_valid_fraction);
    let sums = layout.patch_moments(&u, &m, &g, &valid);
    Ok(sums
        .iter()
        .enumerate()
        .map(|(idx, s)| (layout.center_voxel(idx), patch_terms(s, floor, min_count)))
        .collect())
}

#[cfg(test)]
mod tests;

//! Locally linear correlation (LC²) between ultrasound and MRI.
//!
//! Every patch fits the ultrasound intensities by a linear model in the
//! MRI intensity, the MRI gradient magnitude and a constant. A patch scores
//! the fraction of ultrasound variance the fit explains; the aggregate is
//! the variance-weighted mean of the patch scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Region;

/// Patch layout and variance floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lc2Params {
    /// Half-width of a cubic patch, voxels.
    pub patch_radius: usize,
    /// Distance between patch centres, voxels.
    pub stride: usize,
    /// Patches whose ultrasound standard deviation is below this fraction
    /// of the ultrasound dynamic range get zero weight.
    pub variance_floor: f64,
    /// Minimum fraction of a patch's voxels that must be valid.
    pub min_valid_fraction: f64,
}

impl Default for Lc2Params {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            stride: 2,
            variance_floor: 1e-4,
            min_valid_fraction: 0.5,
        }
    }
}

impl Lc2Params {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("LC² stride must be positive".into()));
        }
        if !(self.variance_floor >= 0.0) || !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::InvalidArgument("LC² floor and valid fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub(crate) const CHANNELS: usize = 10;

/// Raw sums over a patch: `n, Σu, Σm, Σg, Σu², Σm², Σg², Σmg, Σum, Σug`.
pub type Moments = [f64; CHANNELS];

#[inline]
pub(crate) fn voxel_moments(u: f64, m: f64, g: f64) -> Moments {
    [1.0, u, m, g, u * u, m * m, g * g, m * g, u * m, u * g]
}

#[inline]
pub(crate) fn add_moments(acc: &mut Moments, x: &Moments, sign: f64) {
    for c in 0..CHANNELS {
        acc[c] += sign * x[c];
    }
}

/// Variance-weighting terms of one patch: `(explained, total)` ultrasound
/// variance. The patch score is `explained / total`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PatchTerms {
    pub explained: f64,
    pub total: f64,
}

impl PatchTerms {
    pub fn score(&self) -> Option<f64> {
        (self.total > 0.0).then(|| self.explained / self.total)
    }
}

/// Least-squares fit of one patch from its sums. `floor` is the variance
/// below which the patch is ignored; `min_count` the fewest valid voxels.
pub fn patch_terms(s: &Moments, floor: f64, min_count: f64) -> PatchTerms {
    let n = s[0];
    if n < min_count.max(1.0) {
        return PatchTerms::default();
    }
    let (mu, mm, mg) = (s[1] / n, s[2] / n, s[3] / n);
    let cuu = s[4] / n - mu * mu;
    if !(cuu > floor) {
        return PatchTerms::default();
    }
    let cmm = (s[5] / n - mm * mm).max(0.0);
    let cgg = (s[6] / n - mg * mg).max(0.0);
    let cmg = s[7] / n - mm * mg;
    let bm = s[8] / n - mu * mm;
    let bg = s[9] / n - mu * mg;
    let explained = quadratic_pinv_2x2(cmm, cmg, cgg, bm, bg).clamp(0.0, cuu);
    PatchTerms { explained, total: cuu }
}

/// `bᵀ C⁺ b` for the symmetric 2×2 matrix `C = [[a, c], [c, d]]`, using the
/// eigen-decomposition and dropping eigenvalues that are negligible
/// relative to the largest one.
fn quadratic_pinv_2x2(a: f64, c: f64, d: f64, b1: f64, b2: f64) -> f64 {
    let half_tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + c * c).sqrt();
    let l1 = half_tr + disc;
    let l2 = half_tr - disc;
    if !(l1 > 0.0) {
        return 0.0;
    }
    let tol = 1e-10 * l1;
    // Eigenvector of l1; the other one is its perpendicular.
    let (vx, vy) = if c.abs() > 0.0 {
        let (x, y) = (l1 - d, c);
        let nrm = (x * x + y * y).sqrt();
        (x / nrm, y / nrm)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let p1 = vx * b1 + vy * b2;
    let p2 = -vy * b1 + vx * b2;
    let mut q = p1 * p1 / l1;
    if l2 > tol {
        q += p2 * p2 / l2;
    }
    q
}

/// Patch lattice over a region: centres at `lo + r + j·stride`, each cube
/// lying wholly inside the region.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub region: Region,
    pub radius: usize,
    pub stride: usize,
    pub counts: [usize; 3],
}

impl PatchLayout {
    pub fn new(region: Region, radius: usize, stride: usize) -> Self {
        let ext = region.extent();
        let side = 2 * radius + 1;
        let mut counts = [0usize; 3];
        for a in 0..3 {
            counts[a] = if ext[a] >= side { (ext[a] - side) / stride + 1 } else { 0 };
        }
        Self {
            region,
            radius,
            stride,
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.counts[0] * (p[1] + self.counts[1] * p[2])
    }

    /// Voxel index (region-relative) of the first corner of patch `p`.
    pub fn corner(&self, p: [usize; 3]) -> [usize; 3] {
        [p[0] * self.stride, p[1] * self.stride, p[2] * self.stride]
    }

    /// Absolute voxel index of the centre of patch number `idx`.
    pub fn center_voxel(&self, idx: usize) -> [usize; 3] {
        let p = [
            idx % self.counts[0],
            (idx / self.counts[0]) % self.counts[1],
            idx / (self.counts[0] * self.counts[1]),
        ];
        let c = self.corner(p);
        [
            self.region.lo[0] + c[0] + self.radius,
            self.region.lo[1] + c[1] + self.radius,
            self.region.lo[2] + c[2] + self.radius,
        ]
    }

    /// Range of patch indices along axis `a` whose cube contains the
    /// region-relative coordinate `t`.
    #[inline]
    pub fn patches_containing(&self, a: usize, t: usize) -> std::ops::Range<usize> {
        if self.counts[a] == 0 {
            return 0..0;
        }
        let side = 2 * self.radius;
        let first = if t > side { (t - side).div_ceil(self.stride) } else { 0 };
        let last = (t / self.stride).min(self.counts[a] - 1);
        if first > last {
            0..0
        } else {
            first..last + 1
        }
    }

    pub fn min_count(&self, min_valid_fraction: f64) -> f64 {
        let side = (2 * self.radius + 1) as f64;
        (min_valid_fraction * side * side * side).max(4.0)
    }

    /// Sums of every patch from per-voxel samples laid out x-fastest over
    /// the region; invalid voxels are skipped. Separable window sums keep
    /// every total a sum of at most one cube's worth of terms.
    pub fn patch_moments(&self, u: &[f64], m: &[f64], g: &[f64], valid: &[bool]) -> Vec<Moments> {
        let [ex, ey, ez] = self.region.extent();
        let [px, py, pz] = self.counts;
        let side = 2 * self.radius + 1;
        let s = self.stride;
        if self.is_empty() {
            return Vec::new();
        }
        // Pass along x: (px, ey, ez).
        let mut sx = vec![[0.0; CHANNELS]; px * ey * ez];
        for k in 0..ez {
            for j in 0..ey {
                let row = ex * (j + ey * k);
                for p in 0..px {
                    let mut acc = [0.0; CHANNELS];
                    for i in p * s..p * s + side {
                        let v = row + i;
                        if valid[v] {
                            add_moments(&mut acc, &voxel_moments(u[v], m[v], g[v]), 1.0);
                        }
                    }
                    sx[p + px * (j + ey * k)] = acc;
                }
            }
        }
        // Pass along y: (px, py, ez).
        let mut sy = vec![[0.0; CHANNELS]; px * py * ez];
        for k in 0..ez {
            for q in 0..py {
                for p in 0..px {
                    let mut acc = [0.0; CHANNELS];
                    for j in q * s..q * s + side {
                        add_moments(&mut acc, &sx[p + px * (j + ey * k)], 1.0);
                    }
                    sy[p + px * (q + py * k)] = acc;
                }
            }
        }
        // Pass along z.
        let mut out = vec![[0.0; CHANNELS]; px * py * pz];
        for r in 0..pz {
            for q in 0..py {
                for p in 0..px {
                    let mut acc = [0.0; CHANNELS];
                    for k in r * s..r * s + side {
                        add_moments(&mut acc, &sy[p + px * (q + py * k)], 1.0);
                    }
                    out[p + px * (q + py * r)] = acc;
                }
            }
        }
        out
    }
}

/// Aggregate LC² from per-patch terms: `Σ explained / Σ total`.
pub fn aggregate(terms: &[PatchTerms]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in terms {
        num += t.explained;
        den += t.total;
    }
    if den > 0.0 {
        Ok((num / den).clamp(0.0, 1.0))
    } else {
        Err(Error::EmptyOverlap)
    }
}

/// Absolute variance floor for an ultrasound dynamic range.
pub fn variance_floor(params: &Lc2Params, us_range: f64) -> f64 {
    let sd = params.variance_floor * us_range;
    sd * sd
}

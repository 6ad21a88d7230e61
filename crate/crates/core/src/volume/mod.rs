//! Volumetric image containers shared by every stage of the pipeline.
//!
//! Voxel data is stored x-fastest (`i + nx * (j + ny * k)`). World
//! coordinates are in millimetres: the centre of voxel `(i, j, k)` sits at
//! `origin + (i, j, k) * spacing`.

mod bspline;
mod metaimage;
mod morphology;

pub use bspline::BSplineVolume;
pub use morphology::{closing, dilate, erode};
pub use metaimage::{
    load_label_map, load_metaimage, load_volume, save_label_map, save_metaimage, save_volume,
    ElementType, MetaImage, MetaImageData,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Geometry of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// World position of a voxel centre.
    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vector3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    #[inline]
    pub fn world_of_index(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.world(i, j, k)
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn continuous_index(&self, p: &Vec3) -> Vec3 {
        Vector3::new(
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        )
    }

    /// Nearest voxel to a world point, if it lies inside the grid.
    pub fn nearest_voxel(&self, p: &Vec3) -> Option<[usize; 3]> {
        self.nearest_index_voxel(&self.continuous_index(p))
    }

    /// Nearest voxel to a continuous index, if it lies inside the grid.
    #[inline]
    pub fn nearest_index_voxel(&self, c: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if r < 0.0 || r > (self.dims[a] - 1) as f64 || !r.is_finite() {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    #[inline]
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Centre of the grid's bounding box.
    pub fn center(&self) -> Vec3 {
        Vector3::new(
            self.origin[0] + 0.5 * (self.dims[0] - 1) as f64 * self.spacing[0],
            self.origin[1] + 0.5 * (self.dims[1] - 1) as f64 * self.spacing[1],
            self.origin[2] + 0.5 * (self.dims[2] - 1) as f64 * self.spacing[2],
        )
    }

    pub fn full_region(&self) -> Region {
        Region {
            lo: [0, 0, 0],
            hi: self.dims,
        }
    }
}

/// Half-open box of voxel indices `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Region {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0].saturating_sub(self.lo[0]),
            self.hi[1].saturating_sub(self.lo[1]),
            self.hi[2].saturating_sub(self.lo[2]),
        ]
    }

    pub fn len(&self) -> usize {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i >= self.lo[0]
            && i < self.hi[0]
            && j >= self.lo[1]
            && j < self.hi[1]
            && k >= self.lo[2]
            && k < self.hi[2]
    }

    /// Smallest region of `grid` containing every world point in `points`,
    /// grown by `margin_mm` on each side and clipped to the grid.
    pub fn around_points<'a>(
        grid: &Grid,
        points: impl IntoIterator<Item = &'a Vec3>,
        margin_mm: f64,
    ) -> Option<Region> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            let c = grid.continuous_index(p);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        if !any {
            return None;
        }
        let mut region = Region {
            lo: [0; 3],
            hi: [0; 3],
        };
        for a in 0..3 {
            let m = margin_mm / grid.spacing[a];
            let l = (lo[a] - m).floor().max(0.0);
            let h = (hi[a] + m).ceil().min((grid.dims[a] - 1) as f64);
            if h < l {
                return None;
            }
            region.lo[a] = l as usize;
            region.hi[a] = h as usize + 1;
        }
        Some(region)
    }
}

/// A scalar image: pseudo-ultrasound, pseudo-MRI, or any derived map.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("volume contains non-finite values".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Trilinear interpolation at a world point; `None` outside the grid.
    #[inline]
    pub fn sample(&self, p: &Vec3) -> Option<f64> {
        let c = self.grid.continuous_index(p);
        self.sample_index(c.x, c.y, c.z)
    }

    /// Trilinear interpolation that reports out-of-bounds points as 0.
    ///
    /// The second element is `false` when the point fell outside the grid.
    pub fn trilinear_sample(&self, p: &Vec3) -> (f64, bool) {
        match self.sample(p) {
            Some(v) => (v, true),
            None => (0.0, false),
        }
    }

    /// Trilinear interpolation at a continuous voxel index.
    #[inline]
    pub fn sample_index(&self, x: f64, y: f64, z: f64) -> Option<f64> {
        let [nx, ny, nz] = self.grid.dims;
        let (i0, tx) = cell(x, nx)?;
        let (j0, ty) = cell(y, ny)?;
        let (k0, tz) = cell(z, nz)?;
        let i1 = (i0 + 1).min(nx - 1);
        let j1 = (j0 + 1).min(ny - 1);
        let k1 = (k0 + 1).min(nz - 1);
        let g = &self.grid;
        let d = &self.data;
        let c000 = d[g.index(i0, j0, k0)] as f64;
        let c100 = d[g.index(i1, j0, k0)] as f64;
        let c010 = d[g.index(i0, j1, k0)] as f64;
        let c110 = d[g.index(i1, j1, k0)] as f64;
        let c001 = d[g.index(i0, j0, k1)] as f64;
        let c101 = d[g.index(i1, j0, k1)] as f64;
        let c011 = d[g.index(i0, j1, k1)] as f64;
        let c111 = d[g.index(i1, j1, k1)] as f64;
        let c00 = c000 + (c100 - c000) * tx;
        let c10 = c010 + (c110 - c010) * tx;
        let c01 = c001 + (c101 - c001) * tx;
        let c11 = c011 + (c111 - c011) * tx;
        let c0 = c00 + (c10 - c00) * ty;
        let c1 = c01 + (c11 - c01) * ty;
        Some(c0 + (c1 - c0) * tz)
    }

    /// Gradient magnitude by central differences (one-sided at the border),
    /// scaled by the voxel spacing.
    pub fn gradient_magnitude(&self) -> Result<Volume> {
        let g = self.grid;
        if g.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!(
                "gradient needs at least 2 voxels per axis, got {:?}",
                g.dims
            )));
        }
        let mut out = vec![0f32; g.len()];
        let [nx, ny, nz] = g.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let dx = axis_derivative(i, nx, g.spacing[0], |t| self.get(t, j, k));
                    let dy = axis_derivative(j, ny, g.spacing[1], |t| self.get(i, t, k));
                    let dz = axis_derivative(k, nz, g.spacing[2], |t| self.get(i, j, t));
                    out[g.index(i, j, k)] = (dx * dx + dy * dy + dz * dz).sqrt() as f32;
                }
            }
        }
        Ok(Volume { grid: g, data: out })
    }

    /// Nearest-rank percentile of the voxel intensities.
    ///
    /// With `nonzero_only` the zero background is excluded from the ranking.
    pub fn intensity_percentile(&self, q: f64, nonzero_only: bool) -> Result<f64> {
        if !(0.0..=100.0).contains(&q) {
            return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
        }
        let mut values: Vec<f32> = if nonzero_only {
            self.data.iter().copied().filter(|&v| v != 0.0).collect()
        } else {
            self.data.clone()
        };
        if values.is_empty() {
            return Err(Error::EmptyVolume);
        }
        let n = values.len();
        let rank = ((q / 100.0) * n as f64).ceil() as usize;
        let idx = rank.clamp(1, n) - 1;
        let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
        Ok(*v as f64)
    }

    /// Mean of the non-zero voxels.
    pub fn nonzero_mean(&self) -> Result<f64> {
        let (sum, count) = self
            .data
            .iter()
            .filter(|&&v| v != 0.0)
            .fold((0f64, 0usize), |(s, c), &v| (s + v as f64, c + 1));
        if count == 0 {
            return Err(Error::EmptyVolume);
        }
        Ok(sum / count as f64)
    }

    /// Separable Gaussian smoothing with standard deviation `sigma_mm`;
    /// the kernel is truncated at 3σ and renormalized at the borders.
    pub fn gaussian_smoothed(&self, sigma_mm: f64) -> Volume {
        if !(sigma_mm > 0.0) {
            return self.clone();
        }
        let g = self.grid;
        let mut cur: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        for a in 0..3 {
            let s = sigma_mm / g.spacing[a];
            let r = (3.0 * s).ceil() as usize;
            let kernel: Vec<f64> = (0..=2 * r)
                .map(|t| {
                    let d = t as f64 - r as f64;
                    (-0.5 * d * d / (s * s)).exp()
                })
                .collect();
            let stride = match a {
                0 => 1,
                1 => g.dims[0],
                _ => g.dims[0] * g.dims[1],
            };
            let n = g.dims[a];
            let mut next = vec![0.0; cur.len()];
            for (idx, out) in next.iter_mut().enumerate() {
                let t = g.coords(idx)[a];
                let base = idx - t * stride;
                let lo = t.saturating_sub(r);
                let hi = (t + r).min(n - 1);
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for q in lo..=hi {
                    let w = kernel[q + r - t];
                    acc += w * cur[base + q * stride];
                    wsum += w;
                }
                *out = acc / wsum;
            }
            cur = next;
        }
        Volume {
            grid: g,
            data: cur.into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        })
    }
}

#[inline]
fn cell(x: f64, n: usize) -> Option<(usize, f64)> {
    let max = (n - 1) as f64;
    if !(x >= 0.0 && x <= max) {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let i0 = (x.floor() as usize).min(n - 2);
    Some((i0, x - i0 as f64))
}

#[inline]
fn axis_derivative(t: usize, n: usize, h: f64, f: impl Fn(usize) -> f32) -> f64 {
    if t == 0 {
        (f(1) as f64 - f(0) as f64) / h
    } else if t == n - 1 {
        (f(n - 1) as f64 - f(n - 2) as f64) / h
    } else {
        (f(t + 1) as f64 - f(t - 1) as f64) / (2.0 * h)
    }
}

/// Integer label image aligned to a [`Volume`] grid, optionally carrying a
/// per-voxel probability channel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub data: Vec<u8>,
    pub probability: Option<Vec<f32>>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "label length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            data,
            probability: None,
        })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            data: vec![0; grid.len()],
            grid,
            probability: None,
        }
    }

    pub fn with_probability(mut self, probability: Vec<f32>) -> Result<Self> {
        if probability.len() != self.grid.len() {
            return Err(Error::InvalidArgument("probability length mismatch".into()));
        }
        if probability.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        self.probability = Some(probability);
        Ok(self)
    }

    /// Build a binary label from a per-voxel predicate on world positions.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(&Vec3) -> bool) -> Self {
        let mut data = vec![0u8; grid.len()];
        for (idx, d) in data.iter_mut().enumerate() {
            if f(&grid.world_of_index(idx)) {
                *d = 1;
            }
        }
        Self {
            grid,
            data,
            probability: None,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn is_foreground(&self, i: usize, j: usize, k: usize) -> bool {
        self.get(i, j, k) != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Foreground volume in mm³.
    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.grid.voxel_volume()
    }

    /// Collapse every non-zero label to 1.
    pub fn binarized(&self) -> LabelMap {
        LabelMap {
            grid: self.grid,
            data: self.data.iter().map(|&v| u8::from(v != 0)).collect(),
            probability: None,
        }
    }

    /// World positions of all foreground voxel centres.
    pub fn foreground_points(&self) -> Vec<Vec3> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(idx, _)| self.grid.world_of_index(idx))
            .collect()
    }

    /// The probability channel as a float volume.
    pub fn probability_volume(&self) -> Result<Volume> {
        let p = self.probability.as_ref().ok_or(Error::MissingProbability)?;
        Ok(Volume {
            grid: self.grid,
            data: p.clone(),
        })
    }
}

//! Per-voxel samples of a warped atlas over an ultrasound region, with the
//! patch sums and P-term sums needed to score it, and cheap re-scoring when
//! one control-point coordinate of a deformation changes.

use crate::geometry::Affine;
use crate::volume::{Region, Volume};
use crate::{Mat3, Vec3};

use super::lc2::{add_moments, patch_terms, voxel_moments, Lc2Params, Moments, PatchLayout, PatchTerms, CHANNELS};
use super::pterm::{p_adjust, EpsilonRule, PSums, PTermParams};
use super::transform::{FreeFormDeformation, Transform};
use super::AtlasEntry;

/// Components of a registration score.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreParts {
    pub lc2: f64,
    pub p: f64,
    pub p_adjusted: f64,
    pub label_volume_mm3: f64,
    pub total: f64,
}

/// P-term settings used while registering one atlas.
#[derive(Clone, Debug)]
pub struct PTermSetup {
    pub params: PTermParams,
    pub rule: EpsilonRule,
    pub mean_label_volume: f64,
}

pub(crate) struct Field<'a> {
    atlas: &'a AtlasEntry,
    pub region: Region,
    pub layout: PatchLayout,
    points: Vec<Vec3>,
    u: Vec<f64>,
    us_valid: Vec<bool>,
    floor: f64,
    min_count: f64,
    voxel_volume: f64,
    spacing: Vec3,
    p: Option<PTermSetup>,
    /// World → atlas continuous index.
    to_index: Affine,
}

#[derive(Clone, Debug)]
pub(crate) struct State {
    pos: Vec<Vec3>,
    m: Vec<f64>,
    g: Vec<f64>,
    valid: Vec<bool>,
    label: Vec<u8>,
    patches: Vec<Moments>,
    terms: Vec<PatchTerms>,
    explained: f64,
    total: f64,
    psums: PSums,
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    m: f64,
    g: f64,
    valid: bool,
    label: u8,
}

impl State {
    /// Total ultrasound variance over scored patches; zero means no overlap.
    pub fn total_weight(&self) -> f64 {
        self.total
    }
}

impl<'a> Field<'a> {
    pub fn new(us: &'a Volume, atlas: &'a AtlasEntry, region: Region, lc2: &Lc2Params, p: Option<PTermSetup>) -> Self {
        let layout = PatchLayout::new(region, lc2.patch_radius, lc2.stride);
        let [ex, ey, ez] = region.extent();
        let mut points = Vec::with_capacity(ex * ey * ez);
        let mut u = Vec::with_capacity(ex * ey * ez);
        for k in region.lo[2]..region.hi[2] {
            for j in region.lo[1]..region.hi[1] {
                for i in region.lo[0]..region.hi[0] {
                    points.push(us.grid.world(i, j, k));
                    u.push(us.get(i, j, k) as f64);
                }
            }
        }
        let us_valid = u.iter().map(|&v| v != 0.0).collect();
        let (lo, hi) = us.min_max();
        let g = &atlas.mri.grid;
        let inv = Mat3::from_diagonal(&Vec3::new(1.0 / g.spacing[0], 1.0 / g.spacing[1], 1.0 / g.spacing[2]));
        let to_index = Affine {
            matrix: inv,
            offset: -(inv * Vec3::from(g.origin)),
        };
        Self {
            atlas,
            region,
            min_count: layout.min_count(lc2.min_valid_fraction),
            layout,
            points,
            u,
            us_valid,
            floor: super::lc2::variance_floor(lc2, hi - lo),
            voxel_volume: us.grid.voxel_volume(),
            spacing: Vec3::from(us.grid.spacing),
            p,
            to_index,
        }
    }

    #[inline]
    fn sample(&self, c: &Vec3, us_valid: bool) -> Sample {
        let a = self.atlas;
        let label = a.label.grid.nearest_index_voxel(c).map(|[i, j, k]| a.label.get(i, j, k)).unwrap_or(0);
        let (m, g, valid) = if us_valid {
            match (a.moving.sample_index(c.x, c.y, c.z), a.gradient.sample_index(c.x, c.y, c.z)) {
                (Some(m), Some(g)) => (m, g, true),
                _ => (0.0, 0.0, false),
            }
        } else {
            (0.0, 0.0, false)
        };
        Sample { m, g, valid, label }
    }

    /// Full evaluation at `transform`.
    pub fn state(&self, transform: &Transform) -> State {
        let affine = self.to_index.compose(&transform.affine_part());
        let n = self.points.len();
        let mut st = State {
            pos: Vec::with_capacity(n),
            m: Vec::with_capacity(n),
            g: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            label: Vec::with_capacity(n),
            patches: Vec::new(),
            terms: Vec::new(),
            explained: 0.0,
            total: 0.0,
            psums: PSums::default(),
        };
        for (v, x) in self.points.iter().enumerate() {
            let c = match &transform.deformation {
                Some(f) => affine.apply(&(x + f.displacement(x))),
                None => affine.apply(x),
            };
            let s = self.sample(&c, self.us_valid[v]);
            st.pos.push(c);
            st.m.push(s.m);
            st.g.push(s.g);
            st.valid.push(s.valid);
            st.label.push(s.label);
        }
        st.patches = self.layout.patch_moments(&self.u, &st.m, &st.g, &st.valid);
        st.terms = st.patches.iter().map(|s| patch_terms(s, self.floor, self.min_count)).collect();
        for t in &st.terms {
            st.explained += t.explained;
            st.total += t.total;
        }
        if let Some(p) = &self.p {
            for (v, &l) in st.label.iter().enumerate() {
                st.psums.add(l, self.u[v], &p.params, p.rule, 1.0);
            }
        }
        st
    }

    pub fn score(&self, st: &State) -> ScoreParts {
        self.score_from(st.explained, st.total, st.psums)
    }

    fn score_from(&self, explained: f64, total: f64, psums: PSums) -> ScoreParts {
        let lc2 = if total > 0.0 { (explained / total).clamp(0.0, 1.0) } else { 0.0 };
        let mut out = ScoreParts {
            lc2,
            label_volume_mm3: psums.count * self.voxel_volume,
            total: lc2,
            ..Default::default()
        };
        if let Some(p) = &self.p {
            if let Ok(pv) = psums.value(&p.params) {
                out.p = pv;
                out.p_adjusted = p_adjust(pv, out.label_volume_mm3, p.mean_label_volume).unwrap_or(0.0);
                out.total = lc2 + out.p_adjusted;
            }
        }
        out
    }

    /// Labels of the current state, for building a warped label map.
    pub fn labels<'s>(&self, st: &'s State) -> &'s [u8] {
        &st.label
    }

    #[inline]
    fn region_coords(&self, v: usize) -> [usize; 3] {
        let [ex, ey, _] = self.region.extent();
        [v % ex, (v / ex) % ey, v / (ex * ey)]
    }
}

/// Scratch space for single-coordinate re-scoring.
pub(crate) struct Incremental {
    delta: Vec<Moments>,
    touched: Vec<usize>,
    mark: Vec<bool>,
}

impl Incremental {
    pub fn new(field: &Field) -> Self {
        let n = field.layout.len();
        Self {
            delta: vec![[0.0; CHANNELS]; n],
            touched: Vec::new(),
            mark: vec![false; n],
        }
    }

    /// Score of `st` after control point `cp`'s coordinate `axis` moves by
    /// `step` mm in `ffd`. `affine` is the world → atlas-index part of the
    /// transform; `st` is left untouched.
    pub fn rescore(
        &mut self,
        field: &Field,
        st: &State,
        ffd: &FreeFormDeformation,
        affine: &Affine,
        cp: usize,
        axis: usize,
        step: f64,
    ) -> ScoreParts {
        let dir: Vec3 = affine.matrix.column(axis) * step;
        let (lo, hi) = ffd.support(cp);
        let grid_lo = field.points[0];
        let spacing = field.spacing;
        let ext = field.region.extent();
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let first = ((lo[a] - grid_lo[a]) / spacing[a]).floor().max(0.0);
            let last = ((hi[a] - grid_lo[a]) / spacing[a]).ceil();
            let first = if first.is_finite() { first as usize } else { 0 };
            let last = if last.is_finite() && last >= 0.0 {
                (last as usize + 1).min(ext[a])
            } else if last < 0.0 {
                0
            } else {
                ext[a]
            };
            range[a] = (first.min(ext[a]), last);
        }
        let mut psums = st.psums;
        for k in range[2].0..range[2].1 {
            for j in range[1].0..range[1].1 {
                for i in range[0].0..range[0].1 {
                    let v = i + ext[0] * (j + ext[1] * k);
                    let x = &field.points[v];
                    let w = ffd.weight(cp, x);
                    if w == 0.0 {
                        continue;
                    }
                    let c = st.pos[v] + dir * w;
                    let s = field.sample(&c, field.us_valid[v]);
                    if let Some(p) = &field.p {
                        if s.label != st.label[v] {
                            psums.add(st.label[v], field.u[v], &p.params, p.rule, -1.0);
                            psums.add(s.label, field.u[v], &p.params, p.rule, 1.0);
                        }
                    }
                    if s.valid == st.valid[v] && s.m == st.m[v] && s.g == st.g[v] {
                        continue;
                    }
                    let mut d = [0.0; CHANNELS];
                    if st.valid[v] {
                        add_moments(&mut d, &voxel_moments(field.u[v], st.m[v], st.g[v]), -1.0);
                    }
                    if s.valid {
                        add_moments(&mut d, &voxel_moments(field.u[v], s.m, s.g), 1.0);
                    }
                    let rc = field.region_coords(v);
                    for pz in field.layout.patches_containing(2, rc[2]) {
                        for py in field.layout.patches_containing(1, rc[1]) {
                            for px in field.layout.patches_containing(0, rc[0]) {
                                let p = field.layout.index([px, py, pz]);
                                if !self.mark[p] {
                                    self.mark[p] = true;
                                    self.touched.push(p);
                                }
                                add_moments(&mut self.delta[p], &d, 1.0);
                            }
                        }
                    }
                }
            }
        }
        let mut explained = st.explained;
        let mut total = st.total;
        for &p in &self.touched {
            let old = st.terms[p];
            let mut s = st.patches[p];
            add_moments(&mut s, &self.delta[p], 1.0);
            let new = patch_terms(&s, field.floor, field.min_count);
            explained += new.explained - old.explained;
            total += new.total - old.total;
            self.delta[p] = [0.0; CHANNELS];
            self.mark[p] = false;
        }
        self.touched.clear();
        field.score_from(explained, total, psums)
    }
}

impl Field<'_> {
    /// World → atlas continuous-index affine of `transform` (deformation excluded).
    pub fn index_affine(&self, transform: &Transform) -> Affine {
        self.to_index.compose(&transform.affine_part())
    }
}

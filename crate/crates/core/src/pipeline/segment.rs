//! Ventricle segmentation of one ultrasound volume against an atlas bank.

use std::collections::BTreeMap;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brain::{estimate_brain_volume, BrainVolumeReport};
use crate::error::{Error, Result};
use crate::fusion::{binarize_probability, majority_vote, rank_select, staple_fuse, RaterPerformance};
use crate::geometry::Affine;
use crate::init::{atlas_alignment, orient_by_pca};
use crate::mesh::{
    decimate, deform_mesh, laplacian_smooth, marching_cubes, mesh_to_label, Deformation, EnergyParts, SurfaceMesh,
};
use crate::metrics::ventricle_brain_ratio;
use crate::registration::{
    register_nonrigid, register_rigid, warp_label, AtlasEntry, NonrigidResult, PTermParams, PTermSetup, RigidParams,
    RigidResult, ScoreParts,
};
use crate::volume::{closing, LabelMap, Volume};
use crate::Mat3;

use super::config::{Config, MeshConfig, SCHEMA_VERSION};

/// Single atlas after LC² registration.
pub const VARIANT_ATLAS_LC2: &str = "atlas_lc2";
/// Single atlas after LC² + P registration.
pub const VARIANT_ATLAS_LC2_P: &str = "atlas_lc2_p";
/// Single atlas after LC² + P registration, refined by the mesh.
pub const VARIANT_ATLAS_MESH: &str = "atlas_lc2_p_mesh";
pub const VARIANT_MAJORITY_VOTE: &str = "majority_vote";
pub const VARIANT_STAPLE: &str = "staple";
pub const VARIANT_PROPOSED: &str = "proposed";

/// Comparison variants in reporting order.
pub const VARIANTS: [&str; 6] = [
    VARIANT_ATLAS_LC2,
    VARIANT_ATLAS_LC2_P,
    VARIANT_ATLAS_MESH,
    VARIANT_MAJORITY_VOTE,
    VARIANT_STAPLE,
    VARIANT_PROPOSED,
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtlasReport {
    pub id: String,
    pub alignment: Option<Affine>,
    pub rigid_params: RigidParams,
    pub rigid_initial_lc2: f64,
    pub rigid_lc2: f64,
    pub rigid_evaluations: usize,
    /// Ventricle label volume after the rigid stage, in the subject grid.
    pub rigid_label_volume_mm3: f64,
    pub nonrigid_initial: ScoreParts,
    pub nonrigid: ScoreParts,
    pub nonrigid_evaluations: usize,
    /// Score of the extra LC²-only registration, when run.
    pub lc2_only: Option<ScoreParts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StapleReport {
    pub raters: Vec<String>,
    pub performance: Vec<RaterPerformance>,
    pub prior: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshReport {
    pub input_volume_mm3: f64,
    pub marching_cubes_vertices: usize,
    pub vertices: usize,
    pub reached_target: bool,
    /// Displacement threshold used by γ, mm.
    pub l: f64,
    pub energy_initial: EnergyParts,
    pub energy_final: EnergyParts,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    pub mean_abs_displacement_mm: f64,
    pub output_volume_mm3: f64,
}

/// Everything a segmentation run computed, without wall times so that
/// identical inputs give identical reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub schema_version: u32,
    pub seed: u64,
    pub complete: bool,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub brain: Option<BrainVolumeReport>,
    pub orientation: Option<Mat3>,
    pub us_nonzero_mean: Option<f64>,
    pub p_term: Option<PTermParams>,
    pub atlases: Vec<AtlasReport>,
    /// Mean rigid-stage ventricle label volume over the bank (V_M).
    pub mean_label_volume_mm3: Option<f64>,
    pub selected: Vec<String>,
    pub staple: Option<StapleReport>,
    pub fused_volume_mm3: Option<f64>,
    pub mesh: Option<MeshReport>,
    pub ventricle_volume_mm3: Option<f64>,
    pub brain_volume_mm3: Option<f64>,
    pub ratio: Option<f64>,
    pub variant_volumes_mm3: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// State of a run as it progresses; kept on failure for debugging.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub report: SegmentReport,
    pub timings: Vec<StageTime>,
    pub variants: BTreeMap<String, LabelMap>,
    pub probability: Option<LabelMap>,
    pub mesh: Option<SurfaceMesh>,
}

impl Trace {
    fn timed<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(stage));
        self.timings.push(StageTime {
            stage: stage.into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        if let Err(Error::Stage { stage, source }) = &out {
            self.report.failed_stage = Some((*stage).into());
            self.report.error = Some(source.to_string());
        }
        out
    }

    fn add_variant(&mut self, name: &str, label: LabelMap) {
        self.report.variant_volumes_mm3.insert(name.into(), label.volume_mm3());
        self.variants.insert(name.into(), label);
    }
}

/// Final segmentation plus every intermediate worth keeping.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub label: LabelMap,
    pub trace: Trace,
}

pub(crate) fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Run the whole chain. See [`segment_traced`] to keep partial results.
pub fn segment(us: &Volume, atlases: &[AtlasEntry], cfg: &Config) -> Result<Segmentation> {
    let mut trace = Trace::default();
    let label = segment_traced(us, atlases, cfg, &mut trace)?;
    Ok(Segmentation { label, trace })
}

/// Brain volume and orientation, per-atlas rigid then non-rigid
/// registration, top-n selection, STAPLE, thresholding, closing and mesh
/// refinement. Per-atlas work runs on `cfg.workers` threads.
pub fn segment_traced(us: &Volume, atlases: &[AtlasEntry], cfg: &Config, trace: &mut Trace) -> Result<LabelMap> {
    trace.report.schema_version = SCHEMA_VERSION;
    trace.report.seed = cfg.seed;
    cfg.validate()?;
    if atlases.is_empty() {
        return Err(Error::InvalidArgument("atlas bank is empty".into()));
    }
    let out = pool(cfg.workers)?.install(|| run_stages(us, atlases, cfg, trace));
    trace.report.complete = out.is_ok();
    out
}

/// Per-atlas registration state shared by `segment` and `register`.
pub(crate) struct Registered {
    pub brain: BrainVolumeReport,
    pub p_params: PTermParams,
    pub mean_volume: f64,
    pub nonrigid: Vec<NonrigidResult>,
}

/// Brain volume, initialization, rigid and non-rigid registration of every
/// atlas, filling the corresponding report fields.
pub(crate) fn register_bank(us: &Volume, atlases: &[AtlasEntry], cfg: &Config, trace: &mut Trace) -> Result<Registered> {
    let (brain, skull) = trace.timed("brain_volume", |_| estimate_brain_volume(us, &cfg.brain))?;
    info!("brain volume {:.0} mm³", brain.volume_mm3);
    trace.report.brain_volume_mm3 = Some(brain.volume_mm3);
    trace.report.brain = Some(brain.clone());

    let (orientation, p_params) = trace.timed("init", |_| {
        let o = orient_by_pca(us, &skull)?;
        let mean = us.nonzero_mean()?;
        Ok((o, (cfg.p_term.params(mean), mean)))
    })?;
    let (p_params, i_mean) = p_params;
    trace.report.orientation = Some(orientation);
    trace.report.us_nonzero_mean = Some(i_mean);
    trace.report.p_term = Some(p_params.clone());

    let rigid: Vec<(Affine, RigidResult, f64)> = trace.timed("rigid", |_| {
        atlases
            .par_iter()
            .map(|a| {
                let alignment = atlas_alignment(&brain.ellipsoid, &orientation, &a.brain);
                let r = register_rigid(us, a, &alignment, RigidParams::default(), &cfg.rigid, &cfg.lc2)?;
                let v = warp_label(&a.label, &r.transform, &us.grid).volume_mm3();
                Ok((alignment, r, v))
            })
            .collect()
    })?;
    let mean_volume = rigid.iter().map(|r| r.2).sum::<f64>() / rigid.len() as f64;
    trace.report.mean_label_volume_mm3 = Some(mean_volume);
    trace.report.atlases = atlases
        .iter()
        .zip(&rigid)
        .map(|(a, (al, r, v))| AtlasReport {
            id: a.id.clone(),
            alignment: Some(*al),
            rigid_params: r.params,
            rigid_initial_lc2: r.initial_lc2,
            rigid_lc2: r.lc2,
            rigid_evaluations: r.evaluations,
            rigid_label_volume_mm3: *v,
            ..Default::default()
        })
        .collect();
    info!("rigid stage done, mean label volume {mean_volume:.0} mm³");

    let nonrigid_pass = |with_p: bool| -> Result<Vec<NonrigidResult>> {
        atlases
            .par_iter()
            .zip(&rigid)
            .map(|(a, (_, r, _))| {
                let setup = with_p.then(|| PTermSetup {
                    params: p_params.clone(),
                    rule: a.epsilon_rule(),
                    mean_label_volume: mean_volume,
                });
                register_nonrigid(us, a, &r.transform, setup, &cfg.nonrigid, &cfg.lc2)
            })
            .collect()
    };
    let nonrigid = trace.timed("nonrigid", |_| nonrigid_pass(cfg.stages.p_term))?;
    for (rep, n) in trace.report.atlases.iter_mut().zip(&nonrigid) {
        rep.nonrigid_initial = n.initial;
        rep.nonrigid = n.score;
        rep.nonrigid_evaluations = n.evaluations;
    }
    if cfg.stages.all_variants && cfg.stages.p_term {
        let lc2_only = trace.timed("nonrigid_lc2_only", |_| nonrigid_pass(false))?;
        for (rep, n) in trace.report.atlases.iter_mut().zip(&lc2_only) {
            rep.lc2_only = Some(n.score);
        }
        let best = top_atlases(atlases, &lc2_only, 1)?[0];
        trace.add_variant(VARIANT_ATLAS_LC2, lc2_only[best].warped_label.binarized());
    }
    Ok(Registered {
        brain,
        p_params,
        mean_volume,
        nonrigid,
    })
}

/// Indices of the `n` best atlases by total non-rigid score.
fn top_atlases(atlases: &[AtlasEntry], results: &[NonrigidResult], n: usize) -> Result<Vec<usize>> {
    let scores: Vec<(String, f64)> = atlases.iter().zip(results).map(|(a, r)| (a.id.clone(), r.score.total)).collect();
    let ids = rank_select(&scores, n)?;
    Ok(ids.iter().map(|id| atlases.iter().position(|a| &a.id == id).expect("selected ids exist")).collect())
}

fn run_stages(us: &Volume, atlases: &[AtlasEntry], cfg: &Config, trace: &mut Trace) -> Result<LabelMap> {
    let Registered {
        brain,
        p_params,
        mean_volume,
        nonrigid,
    } = register_bank(us, atlases, cfg, trace)?;
    let n = cfg.fusion.top_n.min(atlases.len());
    let selected = trace.timed("selection", |_| top_atlases(atlases, &nonrigid, n))?;
    trace.report.selected = selected.iter().map(|&i| atlases[i].id.clone()).collect();
    let single = nonrigid[selected[0]].warped_label.binarized();
    let single_name = if cfg.stages.p_term { VARIANT_ATLAS_LC2_P } else { VARIANT_ATLAS_LC2 };
    trace.add_variant(single_name, single.clone());

    let labels: Vec<LabelMap> = selected.iter().map(|&i| nonrigid[i].warped_label.binarized()).collect();
    let fused = trace.timed("fusion", |t| {
        t.add_variant(VARIANT_MAJORITY_VOTE, majority_vote(&labels)?.binarized());
        let probability = if labels.len() >= 2 {
            let s = staple_fuse(&labels, &cfg.fusion.staple)?;
            t.report.staple = Some(StapleReport {
                raters: t.report.selected.clone(),
                performance: s.raters.clone(),
                prior: s.prior,
                iterations: s.iterations,
                converged: s.converged,
                log_likelihood: s.log_likelihood.last().copied().unwrap_or(f64::NAN),
            });
            s.probability
        } else {
            let p = labels[0].data.iter().map(|&v| f32::from(v)).collect();
            labels[0].clone().with_probability(p)?
        };
        let mut fused = binarize_probability(&probability, cfg.fusion.threshold)?;
        t.report.fused_volume_mm3 = Some(fused.volume_mm3());
        if cfg.fusion.closing {
            fused = closing(&fused);
        }
        t.probability = Some(probability);
        if fused.count() == 0 {
            return Err(Error::EmptyLabel);
        }
        Ok(fused)
    })?;
    trace.add_variant(VARIANT_STAPLE, fused.clone());

    let final_label = if cfg.stages.mesh {
        let (label, deformation, report) =
            trace.timed("mesh", |_| refine_label(&fused, us, &p_params, &cfg.mesh, Some(mean_volume)))?;
        trace.report.mesh = Some(report);
        trace.mesh = Some(deformation.displaced);
        trace.add_variant(VARIANT_PROPOSED, label.clone());
        if cfg.stages.all_variants {
            let (l, _, _) = trace.timed("mesh_single_atlas", |_| {
                refine_label(&single, us, &p_params, &cfg.mesh, Some(mean_volume))
            })?;
            trace.add_variant(VARIANT_ATLAS_MESH, l);
        }
        label
    } else {
        fused
    };
    let v = final_label.volume_mm3();
    trace.report.ventricle_volume_mm3 = Some(v);
    trace.report.ratio = Some(ventricle_brain_ratio(v, brain.volume_mm3)?);
    info!("ventricle volume {v:.0} mm³, ratio {:.4}", trace.report.ratio.unwrap_or(f64::NAN));
    Ok(final_label)
}

/// Marching cubes, decimation, Laplacian smoothing and energy-driven
/// deformation of a binary label, rasterized back onto the label's grid.
/// With `mean_label_volume` the displacement threshold becomes 2·V_k/V_M.
pub fn refine_label(
    label: &LabelMap,
    us: &Volume,
    p: &PTermParams,
    cfg: &MeshConfig,
    mean_label_volume: Option<f64>,
) -> Result<(LabelMap, Deformation, MeshReport)> {
    let binary = label.binarized();
    let input_volume = binary.volume_mm3();
    let mc = marching_cubes(&binary, cfg.iso)?;
    let target = ((mc.vertex_count() as f64 * cfg.decimate_fraction).round() as usize).max(4);
    let dec = decimate(&mc, target)?;
    let smooth = laplacian_smooth(&dec.mesh, cfg.smooth_iterations, cfg.smooth_lambda)?;
    let mut ep = cfg.energy.clone();
    if let Some(vm) = mean_label_volume {
        ep = ep.with_volume_ratio(input_volume, vm)?;
    }
    let d = deform_mesh(&smooth, us, p, &ep, cfg.max_iterations)?;
    let out = mesh_to_label(&d.displaced, &label.grid)?;
    let disp = &d.rest.displacement;
    let report = MeshReport {
        input_volume_mm3: input_volume,
        marching_cubes_vertices: mc.vertex_count(),
        vertices: smooth.vertex_count(),
        reached_target: dec.reached_target,
        l: ep.l,
        energy_initial: d.initial,
        energy_final: d.literal,
        iterations: d.iterations,
        converged: d.converged,
        line_search_failed: d.line_search_failed,
        mean_abs_displacement_mm: disp.iter().map(|x| x.abs()).sum::<f64>() / disp.len().max(1) as f64,
        output_volume_mm3: out.volume_mm3(),
    };
    Ok((out, d, report))
}

//! File-level drivers behind the command line: configuration, atlas bank
//! loading, and one runner per subcommand. Reports are JSON with a schema
//! version; wall times go to a separate file so reports stay reproducible.

mod config;
mod evaluate;
mod segment;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::brain::{calibrate_cf, estimate_brain_volume, BrainVolumeReport, CfCalibration};
use crate::error::{Error, Result};
use crate::fusion::{binarize_probability, majority_vote, rank_select, staple_fuse};
use crate::mesh::{deform_mesh, read_ply, write_ply, EnergyParts, SurfaceMesh};
use crate::phantom::{generate_phantom, write_json, Phantom, PhantomSpec, PhantomTruth};
use crate::registration::AtlasEntry;
use crate::volume::{closing, load_label_map, load_volume, save_label_map, save_volume, LabelMap};

pub use config::{Config, FusionConfig, MeshConfig, PTermConfig, StageConfig, SCHEMA_VERSION};
pub use evaluate::{case_metrics, run_evaluate, summarize, CaseMetrics, EvalCase, EvaluationReport, MeanSd, MethodSummary};
pub use segment::{
    refine_label, segment, segment_traced, AtlasReport, MeshReport, SegmentReport, Segmentation, StageTime,
    StapleReport, Trace, VARIANTS, VARIANT_ATLAS_LC2, VARIANT_ATLAS_LC2_P, VARIANT_ATLAS_MESH,
    VARIANT_MAJORITY_VOTE, VARIANT_PROPOSED, VARIANT_STAPLE,
};

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write `value` as pretty JSON with a trailing newline, creating parent
/// directories.
pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_json(value, path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Atlas from a phantom directory (`mri.mhd`, `truth_ventricles.mhd`,
/// `truth.json`); the id is the directory name.
pub fn load_atlas(dir: impl AsRef<Path>) -> Result<AtlasEntry> {
    let dir = dir.as_ref();
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mri = load_volume(dir.join("mri.mhd"))?;
    let label = load_label_map(dir.join("truth_ventricles.mhd"))?;
    let truth: PhantomTruth = read_json(&dir.join("truth.json"))?;
    AtlasEntry::new(id, mri, label, truth.ellipsoid)
}

/// Every sub-directory of `dir` holding an `mri.mhd`, sorted by name,
/// except those named in `exclude`.
pub fn atlas_dirs(dir: impl AsRef<Path>, exclude: &[String]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("mri.mhd").is_file())
        .filter(|p| !exclude.iter().any(|x| p.file_name().is_some_and(|n| n.to_string_lossy() == *x)))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no atlases found in {}", dir.display())));
    }
    Ok(dirs)
}

pub fn load_atlas_bank(dir: impl AsRef<Path>, exclude: &[String]) -> Result<Vec<AtlasEntry>> {
    atlas_dirs(dir, exclude)?.iter().map(load_atlas).collect()
}

/// Phantom directory name used for banks.
pub fn phantom_dir_name(seed: u64) -> String {
    format!("phantom_{seed:03}")
}

/// Generate one phantom into `out`, or `count` consecutive seeds into
/// `out/phantom_<seed>` sub-directories.
pub fn run_phantom_generate(spec: &PhantomSpec, out: &Path, count: usize) -> Result<Vec<PhantomTruth>> {
    if count == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let mut truths = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = PhantomSpec {
            seed: spec.seed + i,
            ..spec.clone()
        };
        let p = generate_phantom(&s)?;
        let dir = if count == 1 { out.to_path_buf() } else { out.join(phantom_dir_name(s.seed)) };
        p.save(&dir)?;
        info!("phantom seed {} written to {}", s.seed, dir.display());
        truths.push(p.truth());
    }
    Ok(truths)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BrainVolumeRun {
    pub schema_version: u32,
    pub input: PathBuf,
    pub cf: f64,
    pub volume_mm3: f64,
    pub estimate: BrainVolumeReport,
}

/// Brain volume of an ultrasound file; the detected skull is returned too.
pub fn run_brain_volume(cfg: &Config, us: &Path) -> Result<(BrainVolumeRun, LabelMap)> {
    let v = load_volume(us)?;
    let (estimate, skull) = estimate_brain_volume(&v, &cfg.brain)?;
    Ok((
        BrainVolumeRun {
            schema_version: SCHEMA_VERSION,
            input: us.to_path_buf(),
            cf: estimate.cf,
            volume_mm3: estimate.volume_mm3,
            estimate,
        },
        skull,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegisterRun {
    pub schema_version: u32,
    pub brain_volume_mm3: f64,
    /// V_M used by the P term: mean rigid-stage label volume of the bank.
    pub mean_label_volume_mm3: f64,
    pub atlases: Vec<AtlasReport>,
}

/// Register every atlas in `atlas_dir` to `us` and write, per atlas,
/// `out/<id>/transform.txt` and `out/<id>/warped_label.mhd`, plus
/// `out/register.json`.
pub fn run_register(cfg: &Config, us: &Path, atlas_dir: &Path, exclude: &[String], out: &Path) -> Result<RegisterRun> {
    cfg.validate()?;
    let v = load_volume(us)?;
    let atlases = load_atlas_bank(atlas_dir, exclude)?;
    let mut trace = Trace::default();
    let reg = segment::pool(cfg.workers)?.install(|| segment::register_bank(&v, &atlases, cfg, &mut trace))?;
    for (a, n) in atlases.iter().zip(&reg.nonrigid) {
        let dir = out.join(&a.id);
        create_dir(&dir)?;
        fs::write(dir.join("transform.txt"), n.transform.to_text()).map_err(|e| Error::io(dir.join("transform.txt"), e))?;
        save_label_map(&n.warped_label, dir.join("warped_label.mhd"))?;
    }
    let run = RegisterRun {
        schema_version: SCHEMA_VERSION,
        brain_volume_mm3: reg.brain.volume_mm3,
        mean_label_volume_mm3: reg.mean_volume,
        atlases: trace.report.atlases,
    };
    save_json(&run, out.join("register.json"))?;
    Ok(run)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FuseRun {
    pub schema_version: u32,
    pub method: FuseMethod,
    pub inputs: Vec<PathBuf>,
    pub selected: Vec<PathBuf>,
    pub staple: Option<StapleReport>,
    pub threshold: f64,
    pub fused_volume_mm3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMethod {
    Staple,
    /// Majority vote; the probability is the vote fraction.
    Mv,
}

impl std::str::FromStr for FuseMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staple" => Ok(Self::Staple),
            "mv" => Ok(Self::Mv),
            other => Err(Error::Config(format!("unknown fusion method `{other}` (expected staple or mv)"))),
        }
    }
}

/// Fusion of label files, optionally keeping the `top_n` best by score
/// first. STAPLE output is thresholded and closed per `cfg.fusion`; a
/// majority vote is used as is. Returns the report, the fused label and
/// the probability map.
pub fn run_fuse(
    cfg: &Config,
    method: FuseMethod,
    labels: &[PathBuf],
    scores: Option<&[f64]>,
) -> Result<(FuseRun, LabelMap, LabelMap)> {
    if labels.is_empty() {
        return Err(Error::Config("no labels to fuse".into()));
    }
    let selected: Vec<PathBuf> = match scores {
        Some(s) => {
            if s.len() != labels.len() {
                return Err(Error::Config(format!("{} scores for {} labels", s.len(), labels.len())));
            }
            let named: Vec<(String, f64)> = labels.iter().enumerate().map(|(i, _)| (format!("{i:06}"), s[i])).collect();
            rank_select(&named, cfg.fusion.top_n.min(labels.len()))?
                .iter()
                .map(|id| labels[id.parse::<usize>().expect("numeric ids")].clone())
                .collect()
        }
        None => labels.to_vec(),
    };
    let maps = selected.iter().map(|p| Ok(load_label_map(p)?.binarized())).collect::<Result<Vec<_>>>()?;
    if method == FuseMethod::Mv {
        let mv = majority_vote(&maps)?;
        let fused = LabelMap::new(mv.grid, mv.data.clone())?;
        let probability = mv;
        let report = FuseRun {
            schema_version: SCHEMA_VERSION,
            method,
            inputs: labels.to_vec(),
            selected,
            staple: None,
            threshold: 0.5,
            fused_volume_mm3: fused.volume_mm3(),
        };
        return Ok((report, fused, probability));
    }
    let (probability, staple) = if maps.len() >= 2 {
        let s = staple_fuse(&maps, &cfg.fusion.staple)?;
        let report = StapleReport {
            raters: selected.iter().map(|p| p.display().to_string()).collect(),
            performance: s.raters.clone(),
            prior: s.prior,
            iterations: s.iterations,
            converged: s.converged,
            log_likelihood: s.log_likelihood.last().copied().unwrap_or(f64::NAN),
        };
        (s.probability, Some(report))
    } else {
        let p = maps[0].data.iter().map(|&v| f32::from(v)).collect();
        (maps[0].clone().with_probability(p)?, None)
    };
    let mut fused = binarize_probability(&probability, cfg.fusion.threshold)?;
    if cfg.fusion.closing {
        fused = closing(&fused);
    }
    let report = FuseRun {
        schema_version: SCHEMA_VERSION,
        method,
        inputs: labels.to_vec(),
        selected,
        staple,
        threshold: cfg.fusion.threshold,
        fused_volume_mm3: fused.volume_mm3(),
    };
    Ok((report, fused, probability))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefineRun {
    pub schema_version: u32,
    pub vertices: usize,
    pub l: f64,
    pub energy_initial: EnergyParts,
    pub energy_final: EnergyParts,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    pub volume_before_mm3: f64,
    pub volume_after_mm3: f64,
}

/// Energy-driven refinement of a PLY mesh against an ultrasound volume.
/// With `mean_label_volume` the threshold l becomes 2·V_k/V_M, V_k being
/// the mesh's enclosed volume.
pub fn run_refine(cfg: &Config, mesh: &Path, us: &Path, mean_label_volume: Option<f64>) -> Result<(RefineRun, SurfaceMesh)> {
    let m = read_ply(mesh)?;
    let us = load_volume(us)?;
    let p = cfg.p_term.params(us.nonzero_mean()?);
    let mut ep = cfg.mesh.energy.clone();
    if let Some(vm) = mean_label_volume {
        ep = ep.with_volume_ratio(m.volume().abs(), vm)?;
    }
    let d = deform_mesh(&m, &us, &p, &ep, cfg.mesh.max_iterations)?;
    let report = RefineRun {
        schema_version: SCHEMA_VERSION,
        vertices: m.vertex_count(),
        l: ep.l,
        energy_initial: d.initial,
        energy_final: d.literal,
        iterations: d.iterations,
        converged: d.converged,
        line_search_failed: d.line_search_failed,
        volume_before_mm3: m.volume(),
        volume_after_mm3: d.displaced.volume(),
    };
    Ok((report, d.displaced))
}

/// Run the full segmentation of `us` against the bank in `atlas_dir` and
/// write into `out`: `segmentation.mhd`, `probability.mhd`, `mesh.ply`,
/// `variants/<name>.mhd`, `report.json` and `timings.json`. On failure the
/// partial report and whatever labels exist are still written.
pub fn run_segment(cfg: &Config, us: &Path, atlas_dir: &Path, exclude: &[String], out: &Path) -> Result<SegmentReport> {
    let v = load_volume(us)?;
    let atlases = load_atlas_bank(atlas_dir, exclude)?;
    let mut trace = Trace::default();
    let result = segment_traced(&v, &atlases, cfg, &mut trace);
    create_dir(out)?;
    if let Ok(label) = &result {
        save_label_map(label, out.join("segmentation.mhd"))?;
    }
    if let Some(p) = &trace.probability {
        save_volume(&p.probability_volume()?, out.join("probability.mhd"))?;
    }
    if let Some(m) = &trace.mesh {
        write_ply(m, &out.join("mesh.ply"))?;
    }
    if !trace.variants.is_empty() {
        create_dir(&out.join("variants"))?;
        for (name, l) in &trace.variants {
            save_label_map(l, out.join("variants").join(format!("{name}.mhd")))?;
        }
    }
    save_json(&trace.report, out.join("report.json"))?;
    save_json(&trace.timings, out.join("timings.json"))?;
    result.map(|_| trace.report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationRun {
    pub schema_version: u32,
    pub atlases: Vec<String>,
    pub ellipsoid_volumes_mm3: Vec<f64>,
    pub true_volumes_mm3: Vec<f64>,
    pub calibration: CfCalibration,
}

/// Calibrate C_f over phantom directories: the ellipsoid fitted to each
/// ultrasound skull against the true brain volume.
pub fn run_calibrate_cf(cfg: &Config, atlas_dir: &Path) -> Result<CalibrationRun> {
    let dirs = atlas_dirs(atlas_dir, &[])?;
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    for d in &dirs {
        let us = load_volume(d.join("us.mhd"))?;
        let truth: PhantomTruth = read_json(&d.join("truth.json"))?;
        let (est, _) = estimate_brain_volume(&us, &cfg.brain)?;
        ids.push(d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        pairs.push((est.ellipsoid, truth.brain_volume_mm3));
    }
    calibration_from_pairs(ids, pairs)
}

/// C_f calibration over in-memory phantoms (see [`run_calibrate_cf`]).
pub fn calibrate_cf_on_phantoms(cfg: &Config, phantoms: &[Phantom]) -> Result<CalibrationRun> {
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    for p in phantoms {
        let (est, _) = estimate_brain_volume(&p.us, &cfg.brain)?;
        ids.push(phantom_dir_name(p.spec.seed));
        pairs.push((est.ellipsoid, p.truth_brain_volume));
    }
    calibration_from_pairs(ids, pairs)
}

fn calibration_from_pairs(atlases: Vec<String>, pairs: Vec<(crate::geometry::Ellipsoid, f64)>) -> Result<CalibrationRun> {
    let calibration = calibrate_cf(&pairs)?;
    Ok(CalibrationRun {
        schema_version: SCHEMA_VERSION,
        atlases,
        ellipsoid_volumes_mm3: pairs.iter().map(|(e, _)| e.volume()).collect(),
        true_volumes_mm3: pairs.iter().map(|(_, v)| *v).collect(),
        calibration,
    })
}

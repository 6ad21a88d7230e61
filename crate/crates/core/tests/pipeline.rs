//! End-to-end runs on small phantoms with reduced optimizer budgets.

use std::fs;

use ventri::phantom::{phantom_bank, PhantomSpec};
use ventri::pipeline::{
    case_metrics, phantom_dir_name, run_segment, segment, summarize, Config, SegmentReport, VARIANTS,
};
use ventri::registration::AtlasEntry;

fn quick_config() -> Config {
    let mut cfg = Config::default();
    cfg.phantom = PhantomSpec::default().resampled(48);
    cfg.rigid.evaluations_per_parameter = 15;
    cfg.nonrigid.evaluations_per_parameter = 4;
    cfg.nonrigid.coarse_dims = [3; 3];
    cfg.nonrigid.dims = [4; 3];
    cfg.mesh.max_iterations = 40;
    cfg.workers = 1;
    cfg
}

fn write_bank(cfg: &Config, dir: &std::path::Path, count: usize) {
    for p in phantom_bank(&cfg.phantom, 0, count).unwrap() {
        p.save(dir.join(phantom_dir_name(p.spec.seed))).unwrap();
    }
}

#[test]
fn reports_are_byte_identical_across_runs_and_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = quick_config();
    let bank = tmp.path().join("bank");
    write_bank(&cfg, &bank, 4);
    let us = bank.join(phantom_dir_name(0)).join("us.mhd");
    let exclude = vec![phantom_dir_name(0)];
    let mut reports = Vec::new();
    for (run, workers) in [(0, 1), (1, 1), (2, 2)] {
        cfg.workers = workers;
        let out = tmp.path().join(format!("run{run}"));
        let r = run_segment(&cfg, &us, &bank, &exclude, &out).unwrap();
        assert!(r.complete);
        assert_eq!(r.atlases.len(), 3);
        reports.push(fs::read(out.join("report.json")).unwrap());
        assert!(out.join("timings.json").is_file());
        assert!(out.join("segmentation.mhd").is_file());
        assert!(out.join("mesh.ply").is_file());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);
    let parsed: SegmentReport = serde_json::from_slice(&reports[0]).unwrap();
    let ratio = parsed.ratio.unwrap();
    assert!(ratio > 0.0 && ratio < 0.2, "ratio {ratio}");
}

#[test]
fn a_single_atlas_bank_completes() {
    let cfg = quick_config();
    let bank = phantom_bank(&cfg.phantom, 0, 2).unwrap();
    let atlas = AtlasEntry::from_phantom("only", &bank[1]).unwrap();
    let out = segment(&bank[0].us, &[atlas], &cfg).unwrap();
    let r = &out.trace.report;
    assert!(r.complete);
    assert!(r.staple.is_none());
    assert_eq!(r.selected, vec!["only".to_string()]);
    assert!(out.label.count() > 0);
}

#[test]
fn all_variants_give_the_six_row_table() {
    let mut cfg = quick_config();
    cfg.stages.all_variants = true;
    let bank = phantom_bank(&cfg.phantom, 0, 4).unwrap();
    let atlases: Vec<AtlasEntry> = bank[1..]
        .iter()
        .map(|p| AtlasEntry::from_phantom(phantom_dir_name(p.spec.seed), p).unwrap())
        .collect();
    let out = segment(&bank[0].us, &atlases, &cfg).unwrap();
    let truth = bank[0].truth_ventricles.binarized();
    assert_eq!(out.trace.variants.len(), VARIANTS.len());
    let rows = out
        .trace
        .variants
        .iter()
        .map(|(name, l)| case_metrics("s0", name, l, &truth).unwrap())
        .collect();
    let table = summarize(rows);
    let names: Vec<&str> = table.methods.iter().map(|m| m.method.as_str()).collect();
    assert_eq!(names, VARIANTS.to_vec());
    for m in &table.methods {
        let d = m.dice.unwrap().mean;
        assert!(d > 0.3 && d <= 1.0, "{} dice {d}", m.method);
    }
}

#[test]
fn partial_report_is_written_when_a_stage_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let bank = tmp.path().join("bank");
    write_bank(&cfg, &bank, 2);
    // An all-zero ultrasound volume has no skull: the first stage fails.
    let blank = tmp.path().join("blank.mhd");
    let mut v = ventri::volume::load_volume(bank.join(phantom_dir_name(0)).join("us.mhd")).unwrap();
    v.data.iter_mut().for_each(|x| *x = 0.0);
    ventri::volume::save_volume(&v, &blank).unwrap();
    let out = tmp.path().join("out");
    let err = run_segment(&cfg, &blank, &bank, &[], &out).unwrap_err();
    assert!(matches!(err, ventri::Error::Stage { stage: "brain_volume", .. }), "{err}");
    let r: SegmentReport = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(!r.complete);
    assert_eq!(r.failed_stage.as_deref(), Some("brain_volume"));
}

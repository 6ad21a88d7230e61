//! Batch evaluation of predicted labels against ground truth.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{dice, hausdorff, mean_absolute_surface_distance, pearson_r};
use crate::volume::{load_label_map, LabelMap};

use super::config::SCHEMA_VERSION;
use super::segment::VARIANTS;

/// One prediction/truth pair on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub case: String,
    #[serde(default = "default_method")]
    pub method: String,
    pub pred: PathBuf,
    pub truth: PathBuf,
}

fn default_method() -> String {
    "prediction".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub method: String,
    pub dice: f64,
    /// Undefined (null) when either label is empty.
    pub mad_mm: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub pred_volume_mm3: f64,
    pub truth_volume_mm3: f64,
    /// |V_pred − V_truth| / V_truth.
    pub volume_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub cases: usize,
    pub dice: Option<MeanSd>,
    pub mad_mm: Option<MeanSd>,
    pub hausdorff_mm: Option<MeanSd>,
    pub volume_error: Option<MeanSd>,
    /// Pearson r of predicted against true volumes (needs 3 or more
    /// cases with varying volumes).
    pub volume_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub cases: Vec<CaseMetrics>,
    /// One row per method; known pipeline variants first, in their
    /// canonical order, then the rest by name.
    pub methods: Vec<MethodSummary>,
}

/// Metrics of one pair; sub-labels are collapsed to foreground.
pub fn case_metrics(case: &str, method: &str, pred: &LabelMap, truth: &LabelMap) -> Result<CaseMetrics> {
    let (p, t) = (pred.binarized(), truth.binarized());
    let d = dice(&p, &t)?;
    let both = p.count() > 0 && t.count() > 0;
    let tv = t.volume_mm3();
    Ok(CaseMetrics {
        case: case.into(),
        method: method.into(),
        dice: d,
        mad_mm: if both { Some(mean_absolute_surface_distance(&p, &t)?) } else { None },
        hausdorff_mm: if both { Some(hausdorff(&p, &t)?) } else { None },
        pred_volume_mm3: p.volume_mm3(),
        truth_volume_mm3: tv,
        volume_error: (tv > 0.0).then(|| (p.volume_mm3() - tv).abs() / tv),
    })
}

/// Per-method aggregates of per-case metrics.
pub fn summarize(cases: Vec<CaseMetrics>) -> EvaluationReport {
    let mut by: BTreeMap<String, Vec<&CaseMetrics>> = BTreeMap::new();
    for c in &cases {
        by.entry(c.method.clone()).or_default().push(c);
    }
    let mut order: Vec<String> = VARIANTS.iter().map(|s| s.to_string()).filter(|m| by.contains_key(m)).collect();
    order.extend(by.keys().filter(|m| !VARIANTS.contains(&m.as_str())).cloned());
    let methods = order
        .into_iter()
        .map(|m| {
            let rows = &by[&m];
            let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|c| f(c)).collect() };
            let pv = col(&|c| Some(c.pred_volume_mm3));
            let tv = col(&|c| Some(c.truth_volume_mm3));
            MethodSummary {
                cases: rows.len(),
                dice: MeanSd::of(&col(&|c| Some(c.dice))),
                mad_mm: MeanSd::of(&col(&|c| c.mad_mm)),
                hausdorff_mm: MeanSd::of(&col(&|c| c.hausdorff_mm)),
                volume_error: MeanSd::of(&col(&|c| c.volume_error)),
                volume_r: pearson_r(&pv, &tv).ok(),
                method: m,
            }
        })
        .collect();
    EvaluationReport {
        schema_version: SCHEMA_VERSION,
        cases,
        methods,
    }
}

/// Load every pair and evaluate it.
pub fn run_evaluate(cases: &[EvalCase]) -> Result<EvaluationReport> {
    let rows = cases
        .iter()
        .map(|c| {
            let pred = load_label_map(&c.pred)?;
            let truth = load_label_map(&c.truth)?;
            case_metrics(&c.case, &c.method, &pred, &truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn blob(g: Grid, r: f64) -> LabelMap {
        let c = g.center();
        LabelMap::from_fn(g, |p| (p - c).norm() <= r)
    }

    #[test]
    fn identical_pair_is_perfect() {
        let g = Grid::new([12, 12, 12], [1.0; 3], [0.0; 3]).unwrap();
        let l = blob(g, 4.0);
        let m = case_metrics("a", "x", &l, &l).unwrap();
        assert_eq!((m.dice, m.mad_mm, m.hausdorff_mm, m.volume_error), (1.0, Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn aggregate_is_the_hand_mean() {
        let g = Grid::new([14, 14, 14], [1.0; 3], [0.0; 3]).unwrap();
        let truth = blob(g, 4.5);
        let mut rows = Vec::new();
        for (i, r) in [3.0, 4.0, 5.0, 5.5].iter().enumerate() {
            rows.push(case_metrics(&format!("c{i}"), VARIANT_B, &blob(g, *r), &truth).unwrap());
            rows.push(case_metrics(&format!("c{i}"), "zz_other", &truth, &truth).unwrap());
        }
        let dices: Vec<f64> = rows.iter().filter(|c| c.method == VARIANT_B).map(|c| c.dice).collect();
        let rep = summarize(rows);
        assert_eq!(rep.methods.len(), 2);
        assert_eq!(rep.methods[0].method, VARIANT_B);
        assert_eq!(rep.methods[1].method, "zz_other");
        let s = rep.methods[0].dice.unwrap();
        let mean = (dices[0] + dices[1] + dices[2] + dices[3]) / 4.0;
        assert!((s.mean - mean).abs() < 1e-15);
        let var = dices.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / 3.0;
        assert!((s.sd - var.sqrt()).abs() < 1e-15);
        assert_eq!(rep.methods[1].dice.unwrap().mean, 1.0);
    }

    const VARIANT_B: &str = super::super::segment::VARIANT_STAPLE;

    #[test]
    fn empty_prediction_has_no_distances() {
        let g = Grid::new([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let m = case_metrics("a", "x", &LabelMap::empty(g), &blob(g, 2.0)).unwrap();
        assert_eq!((m.dice, m.mad_mm, m.hausdorff_mm), (0.0, None, None));
        assert_eq!(m.volume_error, Some(1.0));
    }
}

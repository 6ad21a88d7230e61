//! Atlas selection and label fusion: top-n ranking, majority voting, binary
//! STAPLE and thresholding of the resulting probability map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// Default number of atlases kept after ranking.
pub const DEFAULT_TOP_N: usize = 4;
/// Default probability a voxel must exceed to be kept.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Estimated performance of one rater.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterPerformance {
    pub rater: usize,
    /// Probability the rater marks a true foreground voxel (p).
    pub sensitivity: f64,
    /// Probability the rater marks a true background voxel as background (q).
    pub specificity: f64,
}

/// The `n` ids with the highest score, best first; ties go to the smaller id.
pub fn rank_select(results: &[(String, f64)], n: usize) -> Result<Vec<String>> {
    if n > results.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} atlases out of {}",
            results.len()
        )));
    }
    let mut order: Vec<&(String, f64)> = results.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(order.into_iter().take(n).map(|(id, _)| id.clone()).collect())
}

fn check_grids(labels: &[LabelMap]) -> Result<()> {
    let first = labels.first().ok_or_else(|| Error::InvalidArgument("no labels to fuse".into()))?;
    if let Some(bad) = labels.iter().position(|l| l.grid != first.grid) {
        return Err(Error::GridMismatch(format!("rater {bad} is not on the grid of rater 0")));
    }
    Ok(())
}

/// Voxel is foreground iff strictly more than half of the raters mark it.
/// The probability channel carries the vote fraction.
pub fn majority_vote(labels: &[LabelMap]) -> Result<LabelMap> {
    check_grids(labels)?;
    let r = labels.len();
    let grid = labels[0].grid;
    let votes: Vec<usize> = (0..grid.len())
        .into_par_iter()
        .map(|i| labels.iter().filter(|l| l.data[i] != 0).count())
        .collect();
    let data = votes.iter().map(|&v| u8::from(2 * v > r)).collect();
    let fraction = votes.iter().map(|&v| v as f32 / r as f32).collect();
    LabelMap::new(grid, data)?.with_probability(fraction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StapleOptions {
    /// Spatially uniform foreground prior; `None` uses the mean foreground
    /// fraction of the raters.
    pub prior: Option<f64>,
    pub tol: f64,
    pub max_iterations: usize,
    pub initial_sensitivity: f64,
    pub initial_specificity: f64,
}

impl Default for StapleOptions {
    fn default() -> Self {
        Self {
            prior: None,
            tol: 1e-6,
            max_iterations: 100,
            initial_sensitivity: 0.99,
            initial_specificity: 0.99,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StapleResult {
    /// Posterior foreground probability in the probability channel; the
    /// integer data holds `posterior > 0.5`.
    pub probability: LabelMap,
    /// Full-precision posterior per voxel.
    pub posterior: Vec<f64>,
    pub raters: Vec<RaterPerformance>,
    pub prior: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood before each M-step update, then at the
    /// final parameters.
    pub log_likelihood: Vec<f64>,
}

const CHUNK: usize = 4096;

/// Binary STAPLE expectation maximization.
pub fn staple_fuse(labels: &[LabelMap], opts: &StapleOptions) -> Result<StapleResult> {
    check_grids(labels)?;
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("STAPLE needs at least two raters".into()));
    }
    if labels.iter().all(|l| l.data.iter().all(|&v| v == 0)) {
        return Err(Error::EmptyLabel);
    }
    let ok = |v: f64| v > 0.0 && v <= 1.0;
    if !(opts.tol > 0.0) || !ok(opts.initial_sensitivity) || !ok(opts.initial_specificity) {
        return Err(Error::InvalidArgument("STAPLE tolerance and initial p, q must be positive".into()));
    }
    let r = labels.len();
    let n = labels[0].grid.len();
    // Bit r of mask[i] is rater r's decision at voxel i.
    let masks: Vec<u64> = if r <= 64 {
        (0..n)
            .into_par_iter()
            .map(|i| labels.iter().enumerate().fold(0u64, |m, (k, l)| m | (u64::from(l.data[i] != 0) << k)))
            .collect()
    } else {
        return Err(Error::InvalidArgument("STAPLE supports at most 64 raters".into()));
    };
    let prior = match opts.prior {
        Some(f) if f > 0.0 && f < 1.0 => f,
        Some(_) => return Err(Error::InvalidArgument("STAPLE prior must lie in (0, 1)".into())),
        None => {
            let fg: usize = labels.iter().map(|l| l.count()).sum();
            (fg as f64 / (r * n) as f64).clamp(1e-6, 1.0 - 1e-6)
        }
    };
    let mut p = vec![opts.initial_sensitivity; r];
    let mut q = vec![opts.initial_specificity; r];
    let mut w = vec![0.0f64; n];
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let ll = e_step(&masks, &p, &q, prior, &mut w);
        if let Some(&prev) = history.last() {
            debug_assert!(ll >= prev - 1e-9 * prev.abs().max(1.0), "STAPLE likelihood decreased");
        }
        history.push(ll);
        if converged || iterations == opts.max_iterations {
            break;
        }
        let (np, nq) = m_step(&masks, &w, r);
        let change = p
            .iter()
            .zip(&np)
            .chain(q.iter().zip(&nq))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        p = np;
        q = nq;
        iterations += 1;
        converged = change < opts.tol;
    }
    let grid = labels[0].grid;
    let data = w.iter().map(|&v| u8::from(v > 0.5)).collect();
    let probability = LabelMap::new(grid, data)?.with_probability(w.iter().map(|&v| v as f32).collect())?;
    Ok(StapleResult {
        probability,
        posterior: w,
        raters: (0..r)
            .map(|k| RaterPerformance {
                rater: k,
                sensitivity: p[k],
                specificity: q[k],
            })
            .collect(),
        prior,
        iterations,
        converged,
        log_likelihood: history,
    })
}

/// Posterior weights into `w`; returns the observed-data log-likelihood.
fn e_step(masks: &[u64], p: &[f64], q: &[f64], prior: f64, w: &mut [f64]) -> f64 {
    let partial: Vec<f64> = masks
        .par_chunks(CHUNK)
        .zip(w.par_chunks_mut(CHUNK))
        .map(|(mc, wc)| {
            let mut ll = 0.0;
            for (&m, out) in mc.iter().zip(wc.iter_mut()) {
                let mut a = prior;
                let mut b = 1.0 - prior;
                for k in 0..p.len() {
                    if m >> k & 1 == 1 {
                        a *= p[k];
                        b *= 1.0 - q[k];
                    } else {
                        a *= 1.0 - p[k];
                        b *= q[k];
                    }
                }
                let s = a + b;
                *out = if s > 0.0 { a / s } else { prior };
                ll += s.max(f64::MIN_POSITIVE).ln();
            }
            ll
        })
        .collect();
    partial.iter().sum()
}

fn m_step(masks: &[u64], w: &[f64], r: usize) -> (Vec<f64>, Vec<f64>) {
    // [Σ W, Σ (1 − W), per rater Σ_{D=1} W, per rater Σ_{D=0} (1 − W)]
    let partial: Vec<Vec<f64>> = masks
        .par_chunks(CHUNK)
        .zip(w.par_chunks(CHUNK))
        .map(|(mc, wc)| {
            let mut s = vec![0.0; 2 + 2 * r];
            for (&m, &v) in mc.iter().zip(wc) {
                s[0] += v;
                s[1] += 1.0 - v;
                for k in 0..r {
                    if m >> k & 1 == 1 {
                        s[2 + k] += v;
                    } else {
                        s[2 + r + k] += 1.0 - v;
                    }
                }
            }
            s
        })
        .collect();
    let mut s = vec![0.0; 2 + 2 * r];
    for c in &partial {
        for (a, b) in s.iter_mut().zip(c) {
            *a += b;
        }
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 1.0 };
    let p = (0..r).map(|k| ratio(s[2 + k], s[0])).collect();
    let q = (0..r).map(|k| ratio(s[2 + r + k], s[1])).collect();
    (p, q)
}

/// 1 where the probability channel strictly exceeds `threshold`. The
/// comparison happens in the channel's f32 precision so that a stored 0.8
/// is not above a threshold of 0.8.
pub fn binarize_probability(prob: &LabelMap, threshold: f64) -> Result<LabelMap> {
    let p = prob.probability.as_ref().ok_or(Error::MissingProbability)?;
    let t = threshold as f32;
    LabelMap::new(prob.grid, p.iter().map(|&v| u8::from(v > t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid {
        Grid::new([n, n, n], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn random_label(rng: &mut ChaCha8Rng, g: Grid, density: f64) -> LabelMap {
        LabelMap::new(g, (0..g.len()).map(|_| u8::from(rng.random_bool(density))).collect()).unwrap()
    }

    fn dice(a: &LabelMap, b: &LabelMap) -> f64 {
        let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x != 0 && **y != 0).count();
        2.0 * inter as f64 / (a.count() + b.count()) as f64
    }

    #[test]
    fn rank_select_orders_and_breaks_ties_by_id() {
        let r = |v: &[(&str, f64)]| v.iter().map(|(a, b)| (a.to_string(), *b)).collect::<Vec<_>>();
        assert_eq!(rank_select(&r(&[("a", 0.7), ("b", 0.9), ("c", 0.8)]), 3).unwrap(), ["b", "c", "a"]);
        assert_eq!(rank_select(&r(&[("z", 0.5), ("m", 0.5), ("a", 0.5)]), 2).unwrap(), ["a", "m"]);
        assert!(rank_select(&r(&[("a", 1.0)]), 2).is_err());
        assert_eq!(rank_select(&r(&[("only", 0.1)]), 1).unwrap(), ["only"]);
    }

    #[test]
    fn majority_vote_matches_brute_force() {
        let g = grid(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in 1..=6 {
            let labels: Vec<_> = (0..r).map(|_| random_label(&mut rng, g, 0.5)).collect();
            let mv = majority_vote(&labels).unwrap();
            for i in 0..g.len() {
                let mut count = 0;
                for l in &labels {
                    if l.data[i] == 1 {
                        count += 1;
                    }
                }
                let expect = if count * 2 > r { 1 } else { 0 };
                assert_eq!(mv.data[i], expect);
            }
        }
    }

    #[test]
    fn majority_vote_ties_go_to_background() {
        let g = grid(2);
        let one = LabelMap::new(g, vec![1; 8]).unwrap();
        let zero = LabelMap::empty(g);
        let mv = majority_vote(&[one.clone(), one.clone(), zero.clone(), zero.clone()]).unwrap();
        assert!(mv.data.iter().all(|&v| v == 0));
        assert_eq!(majority_vote(&[one.clone(), one.clone()]).unwrap().data, one.data);
        let other = LabelMap::empty(grid(3));
        assert!(matches!(majority_vote(&[one, other]), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn unanimous_raters_are_an_exact_fixed_point() {
        let g = grid(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_label(&mut rng, g, 0.3);
        let res = staple_fuse(&[truth.clone(), truth.clone(), truth.clone()], &StapleOptions::default()).unwrap();
        let prob = res.probability.probability.as_ref().unwrap();
        for (i, &t) in truth.data.iter().enumerate() {
            assert_eq!(prob[i], t as f32);
        }
        for r in &res.raters {
            assert_eq!((r.sensitivity, r.specificity), (1.0, 1.0));
        }
    }

    /// Raters drawn from a known truth with fixed (p, q); EM must recover them.
    #[test]
    fn staple_recovers_generative_rater_parameters() {
        let g = grid(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = g.center();
        let truth = LabelMap::from_fn(g, |x| (x - c).norm() < 18.0);
        let pq = [(0.9, 0.95), (0.8, 0.99), (0.95, 0.9), (0.85, 0.97), (0.7, 0.98)];
        let labels: Vec<LabelMap> = pq
            .iter()
            .map(|&(p, q)| {
                let data = truth
                    .data
                    .iter()
                    .map(|&t| u8::from(if t == 1 { rng.random_bool(p) } else { !rng.random_bool(q) }))
                    .collect();
                LabelMap::new(g, data).unwrap()
            })
            .collect();
        let res = staple_fuse(&labels, &StapleOptions::default()).unwrap();
        for (r, &(p, q)) in res.raters.iter().zip(&pq) {
            assert!((r.sensitivity - p).abs() < 0.05, "p {} vs {p}", r.sensitivity);
            assert!((r.specificity - q).abs() < 0.05, "q {} vs {q}", r.specificity);
        }
        assert!(res.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()));
        assert!(res.converged);
        let fused = binarize_probability(&res.probability, 0.5).unwrap();
        let best = labels.iter().map(|l| dice(l, &truth)).fold(0.0, f64::max);
        assert!(dice(&fused, &truth) >= best);
        assert!(res.probability.probability.as_ref().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn staple_rejects_bad_input() {
        let g = grid(4);
        let e = LabelMap::empty(g);
        assert!(matches!(staple_fuse(&[e.clone(), e.clone()], &StapleOptions::default()), Err(Error::EmptyLabel)));
        let one = LabelMap::new(g, vec![1; 64]).unwrap();
        assert!(staple_fuse(&[one.clone()], &StapleOptions::default()).is_err());
        assert!(matches!(
            staple_fuse(&[one, LabelMap::empty(grid(5))], &StapleOptions::default()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn binarize_is_strict() {
        let g = grid(2);
        let l = LabelMap::empty(g)
            .with_probability(vec![0.8, 0.81, 1.0, 0.0, 0.5, 0.8, 0.9, 0.79])
            .unwrap();
        assert_eq!(binarize_probability(&l, 0.8).unwrap().data, [0, 1, 1, 0, 0, 0, 1, 0]);
        let ones = LabelMap::empty(g).with_probability(vec![1.0; 8]).unwrap();
        assert!(binarize_probability(&ones, 0.8).unwrap().data.iter().all(|&v| v == 1));
        assert!(matches!(binarize_probability(&LabelMap::empty(g), 0.8), Err(Error::MissingProbability)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn staple_and_vote_are_permutation_invariant(seed in 0u64..1000, r in 2usize..6, shift in 1usize..5) {
            let g = grid(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = random_label(&mut rng, g, 0.4);
            let labels: Vec<LabelMap> = (0..r)
                .map(|_| {
                    let data = base.data.iter().map(|&t| if rng.random_bool(0.15) { 1 - t } else { t }).collect();
                    LabelMap::new(g, data).unwrap()
                })
                .collect();
            let mut rotated = labels.clone();
            rotated.rotate_left(shift % r);
            prop_assert_eq!(majority_vote(&labels).unwrap().data, majority_vote(&rotated).unwrap().data);
            let a = staple_fuse(&labels, &StapleOptions::default()).unwrap();
            let b = staple_fuse(&rotated, &StapleOptions::default()).unwrap();
            for (x, y) in a.posterior.iter().zip(&b.posterior) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            prop_assert!(a.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()));
        }

        #[test]
        fn binarize_is_monotone_in_threshold(vals in proptest::collection::vec(0.0f32..=1.0, 8), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let l = LabelMap::empty(grid(2)).with_probability(vals).unwrap();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let a = binarize_probability(&l, lo).unwrap();
            let b = binarize_probability(&l, hi).unwrap();
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x >= y));
        }
    }
}

//! Majority vote and STAPLE on noisy raters of a known label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ventri::fusion::{binarize_probability, majority_vote, staple_fuse, StapleOptions};
use ventri::metrics::dice;
use ventri::volume::{Grid, LabelMap};

fn main() -> ventri::error::Result<()> {
    let g = Grid::new([32, 32, 32], [1.0; 3], [0.0; 3])?;
    let c = g.center();
    let truth = LabelMap::from_fn(g, |p| (p - c).norm() <= 9.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // (sensitivity, specificity) of each simulated rater.
    let quality = [(0.95, 0.99), (0.9, 0.98), (0.8, 0.97), (0.6, 0.995)];
    let raters: Vec<LabelMap> = quality
        .iter()
        .map(|&(p, q)| {
            let data = truth
                .data
                .iter()
                .map(|&t| u8::from(if t != 0 { rng.random::<f64>() < p } else { rng.random::<f64>() > q }))
                .collect();
            LabelMap::new(g, data)
        })
        .collect::<ventri::error::Result<_>>()?;
    for (i, r) in raters.iter().enumerate() {
        println!("rater {i}: dice {:.4}", dice(r, &truth)?);
    }
    println!("majority vote: dice {:.4}", dice(&majority_vote(&raters)?.binarized(), &truth)?);
    let s = staple_fuse(&raters, &StapleOptions::default())?;
    let fused = binarize_probability(&s.probability, 0.8)?;
    println!("STAPLE: dice {:.4} after {} iterations", dice(&fused, &truth)?, s.iterations);
    for (r, &(p, q)) in s.raters.iter().zip(&quality) {
        println!(
            "  rater {}: p {:.3} (true {p}), q {:.4} (true {q})",
            r.rater, r.sensitivity, r.specificity
        );
    }
    Ok(())
}

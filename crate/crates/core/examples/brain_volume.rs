//! Brain volume from the skull ellipsoid, against phantom ground truth.
//!
//! `cargo run --release --example brain_volume -- [seeds]`

use ventri::brain::{estimate_brain_volume, BrainVolumeParams};
use ventri::phantom::{generate_phantom, PhantomSpec};

fn main() -> ventri::error::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let params = BrainVolumeParams::default();
    println!("{:>4} {:>12} {:>12} {:>8}", "seed", "estimate", "truth", "error");
    for seed in 0..n {
        let p = generate_phantom(&PhantomSpec::with_seed(seed))?;
        let (est, _skull) = estimate_brain_volume(&p.us, &params)?;
        let err = (est.volume_mm3 - p.truth_brain_volume) / p.truth_brain_volume;
        println!("{seed:>4} {:>12.0} {:>12.0} {:>7.2}%", est.volume_mm3, p.truth_brain_volume, 100.0 * err);
    }
    Ok(())
}

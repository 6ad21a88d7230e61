//! Fit the brain/ellipsoid volume factor C_f on a phantom bank.
//!
//! `cargo run --release --example calibrate_cf -- [count]`

use ventri::phantom::{phantom_bank, PhantomSpec};
use ventri::pipeline::{calibrate_cf_on_phantoms, Config};

fn main() -> ventri::error::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let bank = phantom_bank(&PhantomSpec::default(), 0, n)?;
    let run = calibrate_cf_on_phantoms(&Config::default(), &bank)?;
    for ((id, e), t) in run.atlases.iter().zip(&run.ellipsoid_volumes_mm3).zip(&run.true_volumes_mm3) {
        println!("{id}: ellipsoid {e:.0} mm³, brain {t:.0} mm³, ratio {:.4}", t / e);
    }
    let fraction = bank.iter().map(|p| p.truth().brain_fraction).sum::<f64>() / n as f64;
    println!("cf {:.4} (generator brain fraction {fraction:.4})", run.calibration.cf);
    println!(
        "leave-one-out error mean {:.2}% max {:.2}%",
        100.0 * run.calibration.loo_mean,
        100.0 * run.calibration.loo_max
    );
    Ok(())
}

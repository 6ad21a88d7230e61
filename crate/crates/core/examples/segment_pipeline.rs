//! Full pipeline on one phantom subject against a leave-self-out bank.
//!
//! `cargo run --release --example segment_pipeline -- [atlases]`

use ventri::metrics::dice;
use ventri::phantom::{phantom_bank, PhantomSpec};
use ventri::pipeline::{segment, Config};
use ventri::registration::AtlasEntry;

fn main() -> ventri::error::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut cfg = Config::default();
    cfg.stages.all_variants = true;
    let bank = phantom_bank(&PhantomSpec::default(), 0, n + 1)?;
    let subject = &bank[0];
    let atlases = bank[1..]
        .iter()
        .map(|p| AtlasEntry::from_phantom(format!("phantom_{:03}", p.spec.seed), p))
        .collect::<ventri::error::Result<Vec<_>>>()?;
    let out = segment(&subject.us, &atlases, &cfg)?;
    let truth = subject.truth_ventricles.binarized();
    let r = &out.trace.report;
    println!("selected atlases {:?}", r.selected);
    for (name, label) in &out.trace.variants {
        println!("{name:<20} dice {:.3}  volume {:>8.0} mm³", dice(label, &truth)?, label.volume_mm3());
    }
    let t = subject.truth();
    println!(
        "ratio {:.4} (truth {:.4}), brain {:.0} mm³ (truth {:.0})",
        r.ratio.unwrap_or(f64::NAN),
        t.ratio,
        r.brain_volume_mm3.unwrap_or(f64::NAN),
        t.brain_volume_mm3
    );
    for s in &out.trace.timings {
        println!("  {:<18} {:>7.1} s", s.stage, s.seconds);
    }
    Ok(())
}

//! Deformable-mesh refinement of an under-segmented ventricle label.
//!
//! `cargo run --release --example mesh_refine -- [seed] [out.ply]`

use ventri::metrics::dice;
use ventri::mesh::write_ply;
use ventri::phantom::{generate_phantom, PhantomSpec};
use ventri::pipeline::{refine_label, Config};
use ventri::volume::erode;

fn main() -> ventri::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = Config::default();
    let p = generate_phantom(&PhantomSpec::with_seed(seed).resampled(96))?;
    let truth = p.truth_ventricles.binarized();
    let start = erode(&truth);
    let params = cfg.p_term.params(p.us.nonzero_mean()?);
    let (refined, deformation, report) = refine_label(&start, &p.us, &params, &cfg.mesh, Some(truth.volume_mm3()))?;
    println!("vertices {}, l {:.2} mm", report.vertices, report.l);
    println!(
        "energy {:.2} -> {:.2} in {} iterations (converged {})",
        report.energy_initial.total, report.energy_final.total, report.iterations, report.converged
    );
    println!("mean |displacement| {:.3} mm", report.mean_abs_displacement_mm);
    println!("dice before {:.4}, after {:.4}", dice(&start, &truth)?, dice(&refined, &truth)?);
    println!(
        "volume before {:.0}, after {:.0}, truth {:.0} mm³",
        start.volume_mm3(),
        refined.volume_mm3(),
        truth.volume_mm3()
    );
    if let Some(path) = args.next() {
        write_ply(&deformation.displaced, path.as_ref())?;
        println!("mesh written to {path}");
    }
    Ok(())
}

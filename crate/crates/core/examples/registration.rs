//! Register one phantom atlas to another phantom's ultrasound: ellipsoid
//! initialization, rigid LC², then free-form LC² + P.

use ventri::brain::{estimate_brain_volume, BrainVolumeParams};
use ventri::init::{atlas_alignment, orient_by_pca};
use ventri::metrics::dice;
use ventri::phantom::{generate_phantom, PhantomSpec};
use ventri::pipeline::Config;
use ventri::registration::{register_nonrigid, register_rigid, warp_label, AtlasEntry, PTermSetup, RigidParams};

fn main() -> ventri::error::Result<()> {
    let cfg = Config::default();
    let subject = generate_phantom(&PhantomSpec::with_seed(0))?;
    let atlas = AtlasEntry::from_phantom("atlas", &generate_phantom(&PhantomSpec::with_seed(1))?)?;
    let truth = subject.truth_ventricles.binarized();
    let us = &subject.us;

    let (brain, skull) = estimate_brain_volume(us, &BrainVolumeParams::default())?;
    let orientation = orient_by_pca(us, &skull)?;
    let alignment = atlas_alignment(&brain.ellipsoid, &orientation, &atlas.brain);
    let rigid = register_rigid(us, &atlas, &alignment, RigidParams::default(), &cfg.rigid, &cfg.lc2)?;
    let rigid_label = warp_label(&atlas.label, &rigid.transform, &us.grid);
    println!(
        "rigid: LC² {:.4} -> {:.4} in {} evaluations, dice {:.3}",
        rigid.initial_lc2,
        rigid.lc2,
        rigid.evaluations,
        dice(&rigid_label.binarized(), &truth)?
    );

    let setup = PTermSetup {
        params: cfg.p_term.params(us.nonzero_mean()?),
        rule: atlas.epsilon_rule(),
        mean_label_volume: rigid_label.volume_mm3(),
    };
    let nr = register_nonrigid(us, &atlas, &rigid.transform, Some(setup), &cfg.nonrigid, &cfg.lc2)?;
    println!(
        "non-rigid: LC² {:.4} P {:.4} total {:.4} in {} evaluations, dice {:.3}",
        nr.score.lc2,
        nr.score.p_adjusted,
        nr.score.total,
        nr.evaluations,
        dice(&nr.warped_label.binarized(), &truth)?
    );
    Ok(())
}

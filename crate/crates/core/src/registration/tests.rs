use super::*;
use crate::geometry::rotation_angle;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::volume::Grid;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
    let g = Grid::new(dims, [1.5; 3], [-10.0, -5.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Smooth-ish random field: sum of a few random plane waves.
    let waves: Vec<(Vec3, f64)> = (0..4)
        .map(|_| {
            (
                Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                rng.random_range(0.0..6.0),
            )
        })
        .collect();
    let data = (0..g.len())
        .map(|idx| {
            let p = g.world_of_index(idx);
            let s: f64 = waves.iter().map(|(k, ph)| (k.dot(&p) + ph).sin()).sum();
            (60.0 + 15.0 * s + rng.random_range(0.0..5.0)) as f32
        })
        .collect();
    Volume::new(g, data).unwrap()
}

fn mapped(v: &Volume, f: impl Fn(f64) -> f64) -> Volume {
    Volume::new(v.grid, v.data.iter().map(|&x| f(x as f64) as f32).collect()).unwrap()
}

#[test]
fn lc2_of_exact_linear_pair_is_one() {
    let mri = random_volume(3, [20, 18, 16]);
    let us = mapped(&mri, |x| 3.0 * x + 5.0);
    let s = lc2_metric(&us, &mri, &Transform::identity(), &Lc2Params::default(), None).unwrap();
    assert!((s - 1.0).abs() < 1e-9, "{s}");
}

#[test]
fn lc2_of_independent_noise_is_small() {
    let mri = random_volume(4, [24, 24, 24]);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let us = Volume::new(mri.grid, (0..mri.grid.len()).map(|_| rng.random_range(1.0f32..255.0)).collect()).unwrap();
        let s = lc2_metric(&us, &mri, &Transform::identity(), &Lc2Params::default(), None).unwrap();
        assert!(s < 0.1, "seed {seed}: {s}");
    }
}

#[test]
fn lc2_is_invariant_to_affine_us_remapping() {
    let mri = random_volume(5, [20, 20, 20]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Integer-valued, strictly positive US so that the remapping is exact in f32.
    let us = Volume::new(mri.grid, mri.data.iter().map(|&x| (x + rng.random_range(0.0f32..40.0)).round().max(1.0)).collect()).unwrap();
    let us2 = mapped(&us, |x| 0.5 * x + 17.0);
    let p = Lc2Params::default();
    let a = lc2_metric(&us, &mri, &Transform::identity(), &p, None).unwrap();
    let b = lc2_metric(&us2, &mri, &Transform::identity(), &p, None).unwrap();
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn empty_overlap_is_an_error() {
    let mri = random_volume(6, [12, 12, 12]);
    let far = Transform::new(
        Affine {
            matrix: Matrix3::identity(),
            offset: Vector3::new(1000.0, 0.0, 0.0),
        },
        RigidParams::default(),
        Vec3::zeros(),
    )
    .unwrap();
    assert!(matches!(
        lc2_metric(&mri, &mri, &far, &Lc2Params::default(), None),
        Err(Error::EmptyOverlap)
    ));
}

/// Independent patch oracle: resample the patch through the transform and
/// solve the 3×3 normal equations directly.
fn oracle_patch(us: &Volume, mri: &Volume, t: &Transform, c: [usize; 3], r: usize) -> Option<f64> {
    let grad = mri.gradient_magnitude().unwrap();
    let mut rows = Vec::new();
    for k in c[2] - r..=c[2] + r {
        for j in c[1] - r..=c[1] + r {
            for i in c[0] - r..=c[0] + r {
                let u = us.get(i, j, k) as f64;
                let y = t.map(&us.grid.world(i, j, k));
                let (m, in_m) = mri.trilinear_sample(&y);
                let (g, in_g) = grad.trilinear_sample(&y);
                if in_m && in_g && u != 0.0 {
                    rows.push((u, m, g));
                }
            }
        }
    }
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &(u, m, g) in &rows {
        let a = Vector3::new(m, g, 1.0);
        ata += a * a.transpose();
        atb += a * u;
    }
    let coef = ata.lu().solve(&atb)?;
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let tot: f64 = rows.iter().map(|r| (r.0 - mean).powi(2)).sum();
    let res: f64 = rows
        .iter()
        .map(|&(u, m, g)| (u - coef.dot(&Vector3::new(m, g, 1.0))).powi(2))
        .sum();
    Some(1.0 - res / tot)
}

#[test]
fn patch_scores_match_normal_equations() {
    let mri = random_volume(7, [22, 22, 22]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let us = Volume::new(
        mri.grid,
        mri.data.iter().map(|&x| (0.02 * (x as f64).powi(2) + rng.random_range(0.0..20.0)) as f32).collect(),
    )
    .unwrap();
    let t = Transform::new(
        Affine::identity(),
        RigidParams {
            rotation: [0.05, -0.03, 0.08],
            translation: [0.7, -0.4, 0.3],
        },
        Vec3::new(5.0, 10.0, 15.0),
    )
    .unwrap();
    let params = Lc2Params::default();
    let patches = lc2_patch_scores(&us, &mri, &t, &params, None).unwrap();
    let mut checked = 0;
    for _ in 0..200 {
        let (c, terms) = patches[rng.random_range(0..patches.len())];
        let (Some(s), Some(o)) = (terms.score(), oracle_patch(&us, &mri, &t, c, params.patch_radius)) else {
            continue;
        };
        assert!((s - o).abs() < 1e-8, "{c:?}: {s} vs {o}");
        checked += 1;
        if checked == 5 {
            break;
        }
    }
    assert_eq!(checked, 5);
}

fn phantom_atlas(seed: u64) -> (crate::phantom::Phantom, AtlasEntry) {
    let p = generate_phantom(&PhantomSpec::with_seed(seed)).unwrap();
    let a = AtlasEntry::from_phantom(format!("p{seed}"), &p).unwrap();
    (p, a)
}

#[test]
fn incremental_rescoring_matches_full_evaluation() {
    let (p, atlas) = phantom_atlas(1);
    let us = &p.us;
    let base = Transform::identity();
    let warped = warp_label(&atlas.label, &base, &us.grid);
    let region = Region::around_points(&us.grid, &warped.foreground_points(), 15.0).unwrap();
    let setup = PTermSetup {
        params: PTermParams::for_volume(us).unwrap(),
        rule: atlas.epsilon_rule(),
        mean_label_volume: atlas.label.volume_mm3(),
    };
    let field = Field::new(us, &atlas, region, &Lc2Params::default(), Some(setup));
    let lo = us.grid.world(region.lo[0], region.lo[1], region.lo[2]);
    let hi = us.grid.world(region.hi[0] - 1, region.hi[1] - 1, region.hi[2] - 1);
    let mut ffd = FreeFormDeformation::zeros(lo, hi, [4, 4, 4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in ffd.displacements.iter_mut() {
        *d = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    }
    let t = base.with_deformation(Some(ffd.clone()));
    let st = field.state(&t);
    let affine = field.index_affine(&base);
    let mut inc = Incremental::new(&field);
    for _ in 0..12 {
        let cp = rng.random_range(0..ffd.len());
        let axis = rng.random_range(0..3);
        let step = rng.random_range(-4.0..4.0);
        let quick = inc.rescore(&field, &st, &ffd, &affine, cp, axis, step);
        let mut moved = ffd.clone();
        moved.displacements[cp][axis] += step;
        let full = field.score(&field.state(&base.with_deformation(Some(moved))));
        assert!((quick.total - full.total).abs() < 1e-9, "{quick:?} vs {full:?}");
        assert_eq!(quick.label_volume_mm3, full.label_volume_mm3);
    }
}

#[test]
fn rigid_stays_at_an_exact_optimum() {
    let (p, atlas) = phantom_atlas(2);
    // Ultrasound that is exactly linear in the MRI: LC² is 1 at the identity.
    let us = mapped(&atlas.moving, |x| 2.0 * x + 1.0);
    let _ = p;
    let out = register_rigid(
        &us,
        &atlas,
        &Affine::identity(),
        RigidParams::default(),
        &RigidOptions::default(),
        &Lc2Params::default(),
    )
    .unwrap();
    assert!((out.lc2 - 1.0).abs() < 1e-9);
    let v = out.params.to_vector();
    assert!(v.iter().all(|c| c.abs() <= 1e-3), "{v:?}");
}

#[test]
fn rigid_recovers_a_small_perturbation_monotonically() {
    let (p, atlas) = phantom_atlas(3);
    let init = RigidParams {
        rotation: [4f64.to_radians(), -3f64.to_radians(), 2f64.to_radians()],
        translation: [3.0, -2.0, 2.5],
    };
    let out = register_rigid(&p.us, &atlas, &Affine::identity(), init, &RigidOptions::default(), &Lc2Params::default()).unwrap();
    assert!(out.lc2 >= out.initial_lc2);
    assert!(out.accepted.windows(2).all(|w| w[1] >= w[0]));
    let m = out.transform.affine_part();
    let angle = rotation_angle(&m.matrix).to_degrees();
    let shift = (m.apply(&out.transform.rigid_center) - out.transform.rigid_center).norm();
    assert!(angle < 2.0 && shift < 2.0, "angle {angle} shift {shift}");
}

#[test]
fn nonrigid_score_decomposes_and_never_regresses() {
    let (subject, _) = phantom_atlas(4);
    let (_, atlas) = phantom_atlas(5);
    let us = &subject.us;
    let orientation = Matrix3::identity();
    let alignment = crate::init::atlas_alignment(&subject.truth_ellipsoid, &orientation, &atlas.brain);
    let rigid = register_rigid(
        us,
        &atlas,
        &alignment,
        RigidParams::default(),
        &RigidOptions {
            evaluations_per_parameter: 20,
            ..Default::default()
        },
        &Lc2Params::default(),
    )
    .unwrap();
    let params = PTermParams::for_volume(us).unwrap();
    let vm = atlas.label.volume_mm3() * alignment.matrix.determinant().abs();
    let setup = PTermSetup {
        params: params.clone(),
        rule: atlas.epsilon_rule(),
        mean_label_volume: vm,
    };
    let opts = NonrigidOptions {
        evaluations_per_parameter: 3,
        dims: [5, 5, 5],
        ..Default::default()
    };
    let out = register_nonrigid(us, &atlas, &rigid.transform, Some(setup), &opts, &Lc2Params::default()).unwrap();
    assert!(out.score.total >= out.initial.total);
    assert!(out.initial.total >= out.initial.lc2);
    let lc2 = lc2_metric(us, &atlas.moving, &out.transform, &Lc2Params::default(), Some(out.region)).unwrap();
    let warped = warp_label(&atlas.label, &out.transform, &us.grid);
    assert_eq!(warped, out.warped_label);
    let pv = p_term(us, &warped, &params, atlas.epsilon_rule()).unwrap();
    let recomputed = lc2 + p_adjust(pv, warped.volume_mm3(), vm).unwrap();
    assert!((out.score.total - recomputed).abs() < 1e-9, "{} vs {recomputed}", out.score.total);
}

//! Segmentation and volumetry measures: overlap, surface distances, volumes,
//! correlation and the ventricle/brain ratio.

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap};

fn same_grid(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch("metric inputs must share a grid".into()));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; two empty labels agree perfectly (1).
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    same_grid(a, b)?;
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one 6-neighbour in the background; voxels
/// on the grid faces count as boundary.
pub fn boundary(label: &LabelMap) -> Vec<bool> {
    let g = &label.grid;
    let [nx, ny, nz] = g.dims;
    let mut out = vec![false; g.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !label.is_foreground(i, j, k) {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                out[g.index(i, j, k)] = edge
                    || !label.is_foreground(i - 1, j, k)
                    || !label.is_foreground(i + 1, j, k)
                    || !label.is_foreground(i, j - 1, k)
                    || !label.is_foreground(i, j + 1, k)
                    || !label.is_foreground(i, j, k - 1)
                    || !label.is_foreground(i, j, k + 1);
            }
        }
    }
    out
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `site`, by separable lower envelopes of parabolas.
pub fn squared_distance_transform(grid: &Grid, sites: &[bool]) -> Vec<f64> {
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let dims = grid.dims;
    for a in 0..3 {
        let stride = match a {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let n = dims[a];
        let h = grid.spacing[a];
        let mut f = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        for start in 0..d.len() {
            if grid.coords(start)[a] != 0 {
                continue;
            }
            for t in 0..n {
                f[t] = d[start + t * stride];
            }
            envelope(&f, h, &mut out, &mut v, &mut z);
            for t in 0..n {
                d[start + t * stride] = out[t];
            }
        }
    }
    d
}

fn envelope(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let pq = q as f64 * h;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let r = v[k as usize];
            let pr = r as f64 * h;
            let s = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (t, o) in out.iter_mut().enumerate() {
        let x = t as f64 * h;
        while z[k + 1] < x {
            k += 1;
        }
        let dx = x - v[k] as f64 * h;
        *o = dx * dx + f[v[k]];
    }
}

/// Distances (mm) from each boundary voxel of `from` to the boundary of `to`.
fn directed_distances(from: &[bool], to: &[bool], grid: &Grid) -> Vec<f64> {
    let dt = squared_distance_transform(grid, to);
    from.iter().zip(&dt).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()).collect()
}

fn boundaries(a: &LabelMap, b: &LabelMap) -> Result<(Vec<bool>, Vec<bool>)> {
    same_grid(a, b)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::EmptyLabel);
    }
    Ok((boundary(a), boundary(b)))
}

/// Mean absolute surface distance: the average of the two directed mean
/// boundary-to-boundary distances.
pub fn mean_absolute_surface_distance(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    let (ba, bb) = boundaries(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let ab = mean(directed_distances(&ba, &bb, &a.grid));
    let ba_ = mean(directed_distances(&bb, &ba, &a.grid));
    Ok(0.5 * (ab + ba_))
}

/// Symmetric Hausdorff distance between the two boundaries.
pub fn hausdorff(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    let (ba, bb) = boundaries(a, b)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(max(directed_distances(&ba, &bb, &a.grid)).max(max(directed_distances(&bb, &ba, &a.grid))))
}

/// Foreground volume in mm³.
pub fn label_volume(a: &LabelMap) -> f64 {
    a.volume_mm3()
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidArgument("pearson_r needs two equal-length series of at least 3 values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson_r of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn ventricle_brain_ratio(v_ventricles: f64, v_brain: f64) -> Result<f64> {
    if !(v_brain > 0.0) {
        return Err(Error::InvalidArgument("brain volume must be positive".into()));
    }
    Ok(v_ventricles / v_brain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid {
        Grid::new([n, n, n], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn random_pair(seed: u64) -> (LabelMap, LabelMap) {
        let g = grid(8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = || loop {
            let d = rng.random_range(0.1..0.7);
            let l = LabelMap::new(g, (0..g.len()).map(|_| u8::from(rng.random_bool(d))).collect()).unwrap();
            if l.count() > 0 {
                return l;
            }
        };
        (make(), make())
    }

    /// All-pairs boundary distances, brute force.
    fn brute_directed(a: &LabelMap, b: &LabelMap) -> Vec<f64> {
        let (ba, bb) = (boundary(a), boundary(b));
        let g = a.grid;
        let pts = |m: &[bool]| -> Vec<[f64; 3]> {
            m.iter()
                .enumerate()
                .filter(|(_, &x)| x)
                .map(|(i, _)| {
                    let c = g.coords(i);
                    [c[0] as f64 * g.spacing[0], c[1] as f64 * g.spacing[1], c[2] as f64 * g.spacing[2]]
                })
                .collect()
        };
        let (pa, pb) = (pts(&ba), pts(&bb));
        pa.iter()
            .map(|p| {
                pb.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn oracles_on_random_pairs() {
        for seed in 0..50 {
            let (a, b) = random_pair(seed);
            let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x == 1 && **y == 1).count();
            let oracle_dice = 2.0 * inter as f64 / (a.count() + b.count()) as f64;
            assert_eq!(dice(&a, &b).unwrap(), oracle_dice);
            let (ab, ba) = (brute_directed(&a, &b), brute_directed(&b, &a));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let h = ab.iter().chain(&ba).cloned().fold(0.0, f64::max);
            assert_eq!(hausdorff(&a, &b).unwrap(), h);
            let mad = mean_absolute_surface_distance(&a, &b).unwrap();
            assert_eq!(mad, 0.5 * (mean(&ab) + mean(&ba)));
            assert!(h >= mad);
        }
    }

    #[test]
    fn distance_transform_handles_anisotropic_spacing() {
        let g = Grid::new([7, 5, 6], [0.7, 1.3, 2.1], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sites: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(0.05)).collect();
        let dt = squared_distance_transform(&g, &sites);
        for i in 0..g.len() {
            let c = g.coords(i);
            let mut best = f64::INFINITY;
            for (j, _) in sites.iter().enumerate().filter(|(_, s)| **s) {
                let e = g.coords(j);
                let d: f64 = (0..3).map(|a| ((c[a] as f64 - e[a] as f64) * g.spacing[a]).powi(2)).sum();
                best = best.min(d);
            }
            assert!((dt[i] - best).abs() <= 1e-9 * best.max(1.0));
        }
    }

    #[test]
    fn hand_cases() {
        let g = grid(10);
        let a = LabelMap::from_fn(g, |x| (x.x - 2.0).abs() < 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(mean_absolute_surface_distance(&a, &a).unwrap(), 0.0);
        let b = LabelMap::from_fn(g, |x| (x.x - 5.0).abs() < 0.5);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(mean_absolute_surface_distance(&a, &b).unwrap(), 3.0);
        assert_eq!(mean_absolute_surface_distance(&b, &a).unwrap(), 3.0);
        let p = LabelMap::from_fn(g, |x| x == &crate::Vec3::new(1.0, 1.0, 1.0));
        let q = LabelMap::from_fn(g, |x| x == &crate::Vec3::new(6.0, 1.0, 1.0));
        assert_eq!(hausdorff(&p, &q).unwrap(), 5.0);
        let e = LabelMap::empty(g);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(matches!(hausdorff(&e, &a), Err(Error::EmptyLabel)));
        assert!(matches!(dice(&a, &LabelMap::empty(grid(3))), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn volumes_and_ratio() {
        let g = Grid::new([10, 1, 1], [1.0, 1.0, 1.2], [0.0; 3]).unwrap();
        assert_eq!(label_volume(&LabelMap::empty(g)), 0.0);
        assert!((label_volume(&LabelMap::new(g, vec![1; 10]).unwrap()) - 12.0).abs() < 1e-12);
        assert!((ventricle_brain_ratio(6000.0, 750000.0).unwrap() - 0.008).abs() < 1e-15);
        assert_eq!(ventricle_brain_ratio(5.0, 5.0).unwrap(), 1.0);
        assert!(ventricle_brain_ratio(5.0, 0.0).is_err());
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let ny: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &ny).unwrap() + 1.0).abs() < 1e-15);
        // Independent computation through raw sums.
        let a = [1.2, 3.4, 2.2, 5.9, 4.1];
        let b = [2.0, 2.9, 3.1, 6.5, 3.3];
        let n = 5.0;
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let sab: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
        let saa: f64 = a.iter().map(|p| p * p).sum();
        let sbb: f64 = b.iter().map(|p| p * p).sum();
        let r = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        assert!((pearson_r(&a, &b).unwrap() - r).abs() < 1e-12);
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_bounded_and_shift_invariant(seed in 0u64..10_000) {
            let (a, b) = random_pair(seed);
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(mean_absolute_surface_distance(&a, &b).unwrap(), mean_absolute_surface_distance(&b, &a).unwrap());
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            // Same relabelling (axis flip) applied to both leaves every metric unchanged.
            let flip = |l: &LabelMap| {
                let g = l.grid;
                let mut data = vec![0u8; g.len()];
                for (i, v) in l.data.iter().enumerate() {
                    let c = g.coords(i);
                    data[g.index(g.dims[0] - 1 - c[0], c[1], c[2])] = *v;
                }
                LabelMap::new(g, data).unwrap()
            };
            let (fa, fb) = (flip(&a), flip(&b));
            prop_assert_eq!(dice(&fa, &fb).unwrap(), d);
            prop_assert_eq!(hausdorff(&fa, &fb).unwrap(), hausdorff(&a, &b).unwrap());
            let m1 = mean_absolute_surface_distance(&fa, &fb).unwrap();
            let m2 = mean_absolute_surface_distance(&a, &b).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12);
        }
    }
}

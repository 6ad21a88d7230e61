//! Interpolating cubic B-spline representation of a volume.
//!
//! Used where a C² intensity model is needed (mesh energy gradients). The
//! coefficients are obtained with the usual recursive prefilter (pole
//! √3 − 2, mirror boundaries), so the spline passes through every voxel value.

use super::Volume;
use crate::Vec3;

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2
const TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct BSplineVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    coeffs: Vec<f64>,
}

impl BSplineVolume {
    pub fn new(v: &Volume) -> Self {
        let dims = v.grid.dims;
        let mut coeffs: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
        let [nx, ny, nz] = dims;
        let mut line = Vec::new();
        // x lines
        for k in 0..nz {
            for j in 0..ny {
                line.clear();
                line.extend((0..nx).map(|i| coeffs[i + nx * (j + ny * k)]));
                prefilter(&mut line);
                for (i, &c) in line.iter().enumerate() {
                    coeffs[i + nx * (j + ny * k)] = c;
                }
            }
        }
        // y lines
        for k in 0..nz {
            for i in 0..nx {
                line.clear();
                line.extend((0..ny).map(|j| coeffs[i + nx * (j + ny * k)]));
                prefilter(&mut line);
                for (j, &c) in line.iter().enumerate() {
                    coeffs[i + nx * (j + ny * k)] = c;
                }
            }
        }
        // z lines
        for j in 0..ny {
            for i in 0..nx {
                line.clear();
                line.extend((0..nz).map(|k| coeffs[i + nx * (j + ny * k)]));
                prefilter(&mut line);
                for (k, &c) in line.iter().enumerate() {
                    coeffs[i + nx * (j + ny * k)] = c;
                }
            }
        }
        Self {
            dims,
            spacing: v.grid.spacing,
            origin: v.grid.origin,
            coeffs,
        }
    }

    /// Value at a world point. Points outside the grid are evaluated on the
    /// mirror-extended spline.
    pub fn value(&self, p: &Vec3) -> f64 {
        self.eval(p, false).0
    }

    /// Value and world-space gradient (per mm) at a world point.
    pub fn value_and_gradient(&self, p: &Vec3) -> (f64, Vec3) {
        self.eval(p, true)
    }

    fn eval(&self, p: &Vec3, with_grad: bool) -> (f64, Vec3) {
        let mut idx = [[0usize; 4]; 3];
        let mut w = [[0f64; 4]; 3];
        let mut dw = [[0f64; 4]; 3];
        for a in 0..3 {
            let x = (p[a] - self.origin[a]) / self.spacing[a];
            let base = x.floor();
            let t = x - base;
            let b = base as i64;
            for (m, slot) in idx[a].iter_mut().enumerate() {
                *slot = mirror(b - 1 + m as i64, self.dims[a]);
            }
            w[a] = weights(t);
            if with_grad {
                dw[a] = derivative_weights(t);
            }
        }
        let [nx, ny, _] = self.dims;
        let mut value = 0.0;
        let mut grad = [0.0f64; 3];
        for (mz, &kz) in idx[2].iter().enumerate() {
            for (my, &jy) in idx[1].iter().enumerate() {
                let row = nx * (jy + ny * kz);
                for (mx, &ix) in idx[0].iter().enumerate() {
                    let c = self.coeffs[ix + row];
                    value += c * w[0][mx] * w[1][my] * w[2][mz];
                    if with_grad {
                        grad[0] += c * dw[0][mx] * w[1][my] * w[2][mz];
                        grad[1] += c * w[0][mx] * dw[1][my] * w[2][mz];
                        grad[2] += c * w[0][mx] * w[1][my] * dw[2][mz];
                    }
                }
            }
        }
        (
            value,
            Vec3::new(
                grad[0] / self.spacing[0],
                grad[1] / self.spacing[1],
                grad[2] / self.spacing[2],
            ),
        )
    }
}

#[inline]
fn weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
fn derivative_weights(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [
        -0.5 * u * u,
        (3.0 * t * t - 4.0 * t) / 2.0,
        (-3.0 * t * t + 2.0 * t + 1.0) / 2.0,
        0.5 * t * t,
    ]
}

#[inline]
fn mirror(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as i64 {
        m = period - m;
    }
    m as usize
}

fn prefilter(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = POLE;
    let lambda = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= lambda;
    }
    c[0] = initial_causal(c, z);
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

fn initial_causal(c: &[f64], z: f64) -> f64 {
    let n = c.len();
    let horizon = (TOLERANCE.ln() / z.abs().ln()).ceil() as usize;
    if horizon < n {
        let mut zn = z;
        let mut sum = c[0];
        for &v in c.iter().take(horizon).skip(1) {
            sum += zn * v;
            zn *= z;
        }
        sum
    } else {
        let mut zn = z;
        let iz = 1.0 / z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n *= z2n * iz;
        for &v in c.iter().take(n - 1).skip(1) {
            sum += (zn + z2n) * v;
            zn *= z;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    }
}

//! Bound-constrained derivative-free minimization with a trust region on
//! interpolated quadratic models.
//!
//! Each iteration interpolates a quadratic through the current centre and
//! two points per coordinate (`x ± Δ eᵢ`, or one-sided pairs against a
//! bound). The diagonal curvature comes from those points; off-diagonal
//! terms are carried between iterations by a symmetric (PSB) update from
//! successive model gradients. The model is minimized over the box
//! intersected with the ∞-norm trust region, the trial point is evaluated,
//! and the centre only ever moves to a strictly better point, so the
//! returned value never exceeds the value at the start.

/// Stopping and sizing parameters, in the caller's variable units.
#[derive(Clone, Debug)]
pub struct TrustRegionOptions {
    pub initial_radius: f64,
    pub final_radius: f64,
    pub max_evaluations: usize,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            initial_radius: 1.0,
            final_radius: 1e-3,
            max_evaluations: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrustRegionOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub evaluations: usize,
    /// `true` when the radius fell below `final_radius` before the budget ran out.
    pub converged: bool,
    /// Objective at every accepted centre, starting with the initial point.
    pub accepted: Vec<f64>,
}

/// An objective for [`minimize_bounded`].
///
/// Implementors that can evaluate a single-coordinate change more cheaply
/// than a full evaluation override [`Objective::eval_coordinate`]; the
/// optimizer announces every new centre through [`Objective::set_center`]
/// before perturbing it. Plain closures work through the blanket impl.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> f64;

    /// Value at `center` with coordinate `i` replaced by `value`. `center`
    /// is always the point last passed to `set_center`.
    fn eval_coordinate(&mut self, center: &[f64], i: usize, value: f64) -> f64 {
        let mut x = center.to_vec();
        x[i] = value;
        self.eval(&x)
    }

    fn set_center(&mut self, _center: &[f64]) {}
}

impl<F: FnMut(&[f64]) -> f64> Objective for F {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self(x)
    }
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimize `f` over the box `[lower, upper]` starting from `x0`.
///
/// Non-finite objective values are treated as +∞.
pub fn minimize_bounded<F: Objective>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &TrustRegionOptions,
) -> TrustRegionOutcome {
    let n = x0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    let eval = |x: &[f64], count: &mut usize, f: &mut F| {
        *count += 1;
        finite_or_inf(f.eval(x))
    };

    let mut evals = 0usize;
    let mut x: Vec<f64> = (0..n).map(|i| x0[i].clamp(lower[i], upper[i])).collect();
    let mut fx = eval(&x, &mut evals, &mut f);
    f.set_center(&x);
    let initial_value = fx;
    let mut accepted = vec![fx];
    let max_radius = (0..n)
        .map(|i| upper[i] - lower[i])
        .fold(0.0f64, f64::max)
        .max(opts.initial_radius);
    let mut delta = opts.initial_radius;

    let mut hess = vec![0.0f64; n * n];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (centre, gradient)
    let mut grad = vec![0.0f64; n];
    let mut trial = x.clone();
    let mut converged = false;

    'outer: loop {
        if delta < opts.final_radius {
            converged = true;
            break;
        }
        // Interpolation points along each coordinate.
        let mut best_stencil: Option<(f64, usize, f64)> = None;
        for i in 0..n {
            let room_lo = x[i] - lower[i];
            let room_hi = upper[i] - x[i];
            let h = delta;
            let (s1, s2) = if room_lo >= h && room_hi >= h {
                (-h, h)
            } else if room_hi >= 2.0 * h {
                (h, 2.0 * h)
            } else if room_lo >= 2.0 * h {
                (-h, -2.0 * h)
            } else if room_lo > 1e-12 && room_hi > 1e-12 {
                (-room_lo.min(h), room_hi.min(h))
            } else if room_hi > 1e-12 {
                (0.5 * room_hi.min(2.0 * h), room_hi.min(2.0 * h))
            } else if room_lo > 1e-12 {
                (-0.5 * room_lo.min(2.0 * h), -room_lo.min(2.0 * h))
            } else {
                grad[i] = 0.0;
                hess[i * n + i] = 0.0;
                continue;
            };
            if evals + 2 > opts.max_evaluations {
                break 'outer;
            }
            let f1 = finite_or_inf(f.eval_coordinate(&x, i, x[i] + s1));
            let f2 = finite_or_inf(f.eval_coordinate(&x, i, x[i] + s2));
            evals += 2;
            let d1 = (f1 - fx) / s1;
            let d2 = (f2 - fx) / s2;
            let (b, c) = if f1.is_finite() && f2.is_finite() {
                let c = 2.0 * (d2 - d1) / (s2 - s1);
                (d1 - 0.5 * c * s1, c)
            } else {
                (0.0, 0.0)
            };
            grad[i] = b;
            hess[i * n + i] = c;
            for (fs, s) in [(f1, s1), (f2, s2)] {
                if fs < fx && best_stencil.is_none_or(|(bf, _, _)| fs < bf) {
                    best_stencil = Some((fs, i, s));
                }
            }
        }

        // Carry cross-curvature from the previous centre.
        if let Some((px, pg)) = prev.take() {
            psb_update(&mut hess, n, &x, &grad, &px, &pg);
        }

        let step = solve_box_subproblem(&grad, &hess, n, &x, lower, upper, delta);
        let mut hs = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += hess[i * n + j] * step[j];
            }
            hs[i] = acc;
        }
        let predicted = -(0..n).map(|i| grad[i] * step[i] + 0.5 * step[i] * hs[i]).sum::<f64>();
        let step_norm = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));

        let mut trial_value = f64::INFINITY;
        let mut rho = -1.0;
        let mut evaluated_trial = false;
        if predicted > 1e-14 * (1.0 + fx.abs()) && step_norm > 1e-12 {
            if evals + 1 > opts.max_evaluations {
                break;
            }
            for i in 0..n {
                trial[i] = (x[i] + step[i]).clamp(lower[i], upper[i]);
            }
            trial_value = eval(&trial, &mut evals, &mut f);
            rho = (fx - trial_value) / predicted;
            evaluated_trial = true;
        }

        let old_x = x.clone();
        let old_grad = grad.clone();
        let stencil_improved = best_stencil.is_some();
        let mut moved = false;
        if evaluated_trial
            && trial_value < fx
            && best_stencil.is_none_or(|(bf, _, _)| trial_value <= bf)
        {
            x.copy_from_slice(&trial);
            fx = trial_value;
            moved = true;
        } else if let Some((bf, i, s)) = best_stencil {
            x[i] += s;
            fx = bf;
            moved = true;
        }
        if moved {
            f.set_center(&x);
            accepted.push(fx);
            prev = Some((old_x, old_grad));
        } else {
            prev = None;
        }

        if evaluated_trial && rho >= 0.75 && step_norm >= 0.9 * delta {
            delta = (2.0 * delta).min(max_radius);
        } else if !(evaluated_trial && rho >= 0.25) && !stencil_improved {
            delta *= 0.5;
        } else if evaluated_trial && rho < 0.1 {
            delta *= 0.5;
        }
    }

    TrustRegionOutcome {
        x,
        value: fx,
        initial_value,
        evaluations: evals,
        converged,
        accepted,
    }
}

fn psb_update(hess: &mut [f64], n: usize, x: &[f64], g: &[f64], px: &[f64], pg: &[f64]) {
    let s: Vec<f64> = (0..n).map(|i| x[i] - px[i]).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss <= 1e-24 {
        return;
    }
    let mut r = vec![0.0; n];
    for i in 0..n {
        let mut hs = 0.0;
        for j in 0..n {
            hs += hess[i * n + j] * s[j];
        }
        r[i] = (g[i] - pg[i]) - hs;
    }
    let rs: f64 = r.iter().zip(&s).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            hess[i * n + j] += (r[i] * s[j] + s[i] * r[j]) / ss - rs * s[i] * s[j] / (ss * ss);
        }
    }
}

/// Minimize gᵀs + ½ sᵀHs over the box ∩ ‖s‖∞ ≤ Δ by exact cyclic
/// coordinate minimization; starts at s = 0 so the model never increases.
fn solve_box_subproblem(
    g: &[f64],
    h: &[f64],
    n: usize,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
    delta: f64,
) -> Vec<f64> {
    let lo: Vec<f64> = (0..n).map(|i| (lower[i] - x[i]).max(-delta).min(0.0)).collect();
    let hi: Vec<f64> = (0..n).map(|i| (upper[i] - x[i]).min(delta).max(0.0)).collect();
    let mut s = vec![0.0; n];
    let mut hs = vec![0.0; n];
    for _sweep in 0..60 {
        let mut change = 0.0f64;
        for i in 0..n {
            let a = h[i * n + i];
            let r = g[i] + hs[i] - a * s[i];
            let model = |t: f64| r * t + 0.5 * a * t * t;
            let candidate = if a > 0.0 {
                (-r / a).clamp(lo[i], hi[i])
            } else if model(lo[i]) < model(hi[i]) {
                lo[i]
            } else {
                hi[i]
            };
            let new = if model(candidate) <= model(s[i]) { candidate } else { s[i] };
            let d = new - s[i];
            if d != 0.0 {
                for j in 0..n {
                    hs[j] += h[j * n + i] * d;
                }
                s[i] = new;
                change = change.max(d.abs());
            }
        }
        if change <= 1e-10 * delta {
            break;
        }
    }
    s
}

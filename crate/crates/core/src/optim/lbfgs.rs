//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the largest gradient component falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step lowers the objective by less than
    /// `value_tolerance * (1 + |f|)`.
    pub value_tolerance: f64,
    /// Largest coordinate change allowed in the first trial of a line search.
    pub max_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 7,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            value_tolerance: 1e-10,
            max_step: 1.0,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective at the start and after every accepted step.
    pub accepted: Vec<f64>,
    pub converged: bool,
    /// Set when a line search could not find a decrease; `x` is then the
    /// best iterate found.
    pub line_search_failed: bool,
}

/// Minimize `f`, which returns the value and writes the gradient into its
/// second argument.
pub fn minimize_lbfgs<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    let mut accepted = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    while iterations < opts.max_iterations {
        if !fx.is_finite() {
            line_search_failed = true;
            break;
        }
        if inf_norm(&g) < opts.gradient_tolerance {
            converged = true;
            break;
        }
        let mut d = two_loop(&g, &pairs);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let dmax = inf_norm(&d);
        let mut step = if pairs.is_empty() {
            (opts.max_step / dmax).min(1.0)
        } else {
            1.0f64.min(opts.max_step / dmax)
        };

        let mut found = false;
        let mut f_new = f64::INFINITY;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            f_new = f(&x_new, &mut g_new);
            evaluations += 1;
            if f_new.is_finite() && f_new <= fx + opts.armijo * step * slope && f_new < fx {
                found = true;
                break;
            }
            step *= 0.5;
        }
        if !found {
            line_search_failed = true;
            break;
        }
        iterations += 1;
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        accepted.push(fx);
        if decrease < opts.value_tolerance * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
    }

    LbfgsOutcome {
        x,
        value: fx,
        iterations,
        evaluations,
        accepted,
        converged,
        line_search_failed,
    }
}

fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_rosenbrock() {
        let out = minimize_lbfgs(
            |x, g| {
                g[0] = -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]);
                g[1] = 200.0 * (x[1] - x[0] * x[0]);
                100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
            },
            &[-1.2, 1.0],
            &LbfgsOptions {
                max_iterations: 500,
                value_tolerance: 0.0,
                gradient_tolerance: 1e-8,
                ..Default::default()
            },
        );
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5, "{out:?}");
        assert!(out.accepted.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_many_dimensions() {
        let n = 50;
        let out = minimize_lbfgs(
            |x, g| {
                let mut f = 0.0;
                for i in 0..n {
                    let w = 1.0 + i as f64;
                    g[i] = 2.0 * w * (x[i] - 1.0);
                    f += w * (x[i] - 1.0).powi(2);
                }
                f
            },
            &vec![0.0; n],
            &LbfgsOptions {
                max_step: 10.0,
                value_tolerance: 0.0,
                ..Default::default()
            },
        );
        assert!(out.converged);
        assert!(out.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn flags_when_no_descent_is_possible() {
        // Gradient that lies about the slope.
        let out = minimize_lbfgs(
            |x, g| {
                g[0] = -1.0;
                x[0] * x[0]
            },
            &[0.0],
            &LbfgsOptions::default(),
        );
        assert!(out.line_search_failed);
        assert_eq!(out.x, vec![0.0]);
    }
}

//! Feasibility-guarded quasi-Newton ascent.
//!
//! BFGS on the negated objective with an Armijo backtracking line search
//! that only evaluates the objective, never the gradient. Steps that leave
//! the feasible region (strict threshold monotonicity, for the estimation
//! caller) are rejected and shrunk like failed Armijo steps, so every
//! accepted iterate is feasible and the accepted-value trace is
//! non-decreasing. When a line search stalls the solver retries along the
//! raw gradient with a reset Hessian, then falls back to a short
//! Nelder-Mead pass; the fallback also rescues callers whose gradients are
//! locally unreliable.

use nalgebra::{DMatrix, DVector};

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: u32 = 40;
const CURVATURE_FLOOR: f64 = 1e-10;
const MAX_RESCUES: usize = 2;

// Diagnostic fields beyond (x, value, converged, trace) are read by tests.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rescues: usize,
    /// Objective at every accepted iterate, starting point included.
    pub trace: Vec<f64>,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Backtracking search along `d` from `x`: the largest step in
/// {1, 1/2, ...} that stays feasible and clears the Armijo bound. Returns
/// the accepted point and value, or None after `MAX_HALVINGS` rejections.
fn line_search<F, P>(
    x: &DVector<f64>,
    f0: f64,
    d: &DVector<f64>,
    slope: f64,
    f_only: &F,
    feasible: &P,
) -> Option<(DVector<f64>, f64)>
where
    F: Fn(&[f64]) -> f64,
    P: Fn(&[f64]) -> bool,
{
    let mut alpha = 1.0;
    for _ in 0..MAX_HALVINGS {
        let cand = x + d * alpha;
        if feasible(cand.as_slice()) {
            let fc = f_only(cand.as_slice());
            // Written so a NaN objective rejects the step.
            if fc >= f0 + ARMIJO_C1 * alpha * slope {
                return Some((cand, fc));
            }
        }
        alpha *= 0.5;
    }
    None
}

/// Short Nelder-Mead pass minimizing the negated objective; infeasible
/// vertices score +inf. Returns the best point and value found.
fn nelder_mead<F, P>(
    x: &DVector<f64>,
    f0: f64,
    f_only: &F,
    feasible: &P,
) -> (DVector<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
    P: Fn(&[f64]) -> bool,
{
    let n = x.len();
    let psi = |p: &DVector<f64>| -> f64 {
        if !feasible(p.as_slice()) {
            return f64::INFINITY;
        }
        let v = f_only(p.as_slice());
        if v.is_nan() {
            f64::INFINITY
        } else {
            -v
        }
    };
    let mut budget = 150 + 20 * n;
    let eval = |p: &DVector<f64>, budget: &mut usize| {
        *budget = budget.saturating_sub(1);
        psi(p)
    };

    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x.clone(), -f0));
    for i in 0..n {
        let delta = 0.05 * x[i].abs().max(1.0);
        let mut v = x.clone();
        v[i] += delta;
        if !feasible(v.as_slice()) {
            v[i] = x[i] - delta;
        }
        let fv = eval(&v, &mut budget);
        simplex.push((v, fv));
    }

    while budget > 0 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        if !spread.is_finite() && simplex[0].1.is_infinite() {
            break;
        }
        if spread <= 1e-12 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let centroid: DVector<f64> = simplex[..n]
            .iter()
            .fold(DVector::zeros(n), |acc, (v, _)| acc + v)
            / n as f64;
        let worst = simplex[n].0.clone();
        let reflect = &centroid * 2.0 - &worst;
        let fr = eval(&reflect, &mut budget);
        if fr < simplex[0].1 {
            let expand = &centroid * 3.0 - &worst * 2.0;
            let fe = eval(&expand, &mut budget);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contract = if fr < simplex[n].1 {
                (&centroid + &reflect) * 0.5
            } else {
                (&centroid + &worst) * 0.5
            };
            let fc = eval(&contract, &mut budget);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let v = (&entry.0 + &best) * 0.5;
                    entry.1 = eval(&v, &mut budget);
                    entry.0 = v;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (best, fb) = simplex.swap_remove(0);
    (best, -fb)
}

/// Maximizes a smooth objective from a feasible start. `f_grad` returns the
/// value and gradient together; `f_only` must agree with its value exactly
/// (the line search relies on it). Convergence means the gradient sup norm
/// fell to `grad_tol`.
pub(crate) fn maximize<F, FG, P>(
    x0: &[f64],
    f_only: F,
    f_grad: FG,
    feasible: P,
    max_iter: usize,
    grad_tol: f64,
) -> OptimResult
where
    F: Fn(&[f64]) -> f64,
    FG: Fn(&[f64]) -> (f64, Vec<f64>),
    P: Fn(&[f64]) -> bool,
{
    let n = x0.len();
    debug_assert!(feasible(x0), "optimizer started infeasible");
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g) = f_grad(x.as_slice());
    let mut g = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_fresh = true;
    let mut trace = vec![f];
    let mut rescues = 0;
    let mut iterations = 0;

    while iterations < max_iter {
        if sup_norm(&g) <= grad_tol {
            break;
        }
        iterations += 1;

        let mut d = &h * &g;
        let mut slope = g.dot(&d);
        if slope <= 0.0 {
            h = DMatrix::identity(n, n);
            h_is_fresh = true;
            d = g.clone();
            slope = g.dot(&d);
        }

        let mut step = line_search(&x, f, &d, slope, &f_only, &feasible);
        if step.is_none() && !h_is_fresh {
            h = DMatrix::identity(n, n);
            h_is_fresh = true;
            d = g.clone();
            slope = g.dot(&d);
            step = line_search(&x, f, &d, slope, &f_only, &feasible);
        }

        // The line-search value is recomputed below together with the
        // gradient; only the point survives.
        let (x_new, _) = match step {
            Some(s) => s,
            None => {
                if rescues >= MAX_RESCUES {
                    break;
                }
                rescues += 1;
                let (cand, fc) = nelder_mead(&x, f, &f_only, &feasible);
                if fc <= f + 1e-12 * (1.0 + f.abs()) {
                    break;
                }
                h = DMatrix::identity(n, n);
                h_is_fresh = true;
                (cand, fc)
            }
        };

        let (f_chk, g_new) = f_grad(x_new.as_slice());
        let g_new = DVector::from_vec(g_new);
        let s = &x_new - &x;
        // Negated-objective curvature: positive for concave stretches.
        let y = &g - &g_new;
        let sy = s.dot(&y);
        if sy > CURVATURE_FLOOR * s.norm() * y.norm() {
            if h_is_fresh {
                h *= sy / y.dot(&y);
                h_is_fresh = false;
            }
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            let rho = 1.0 / sy;
            let coef = rho * rho * yhy + rho;
            // H <- (I - rho s y')H(I - rho y s') + rho s s', expanded.
            h += &s * s.transpose() * coef
                - (&s * hy.transpose() + &hy * s.transpose()) * rho;
        }

        x = x_new;
        f = f_chk;
        g = g_new;
        trace.push(f);
    }

    let grad_norm = sup_norm(&g);
    OptimResult {
        x: x.as_slice().to_vec(),
        value: f,
        grad_norm,
        iterations,
        converged: grad_norm <= grad_tol,
        rescues,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn always(_: &[f64]) -> bool {
        true
    }

    #[test]
    fn quadratic_bowl_converges_to_center() {
        let center = [1.5, -2.0, 0.25];
        let weights = [1.0, 4.0, 0.5];
        let f = |x: &[f64]| -> f64 {
            -x.iter()
                .zip(&center)
                .zip(&weights)
                .map(|((xi, ci), wi)| wi * (xi - ci) * (xi - ci))
                .sum::<f64>()
        };
        let fg = |x: &[f64]| -> (f64, Vec<f64>) {
            let g = x
                .iter()
                .zip(&center)
                .zip(&weights)
                .map(|((xi, ci), wi)| -2.0 * wi * (xi - ci))
                .collect();
            (f(x), g)
        };
        let r = maximize(&[0.0, 0.0, 0.0], f, fg, always, 200, 1e-10);
        assert!(r.converged, "grad norm {}", r.grad_norm);
        for (xi, ci) in r.x.iter().zip(&center) {
            assert!((xi - ci).abs() < 1e-8);
        }
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(r.rescues, 0);
    }

    #[test]
    fn banana_valley_converges() {
        let f = |x: &[f64]| -> f64 {
            let (a, b) = (x[0], x[1]);
            -(100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2))
        };
        let fg = |x: &[f64]| -> (f64, Vec<f64>) {
            let (a, b) = (x[0], x[1]);
            let g = vec![
                400.0 * a * (b - a * a) + 2.0 * (1.0 - a),
                -200.0 * (b - a * a),
            ];
            (f(x), g)
        };
        let r = maximize(&[-1.2, 1.0], f, fg, always, 600, 1e-8);
        assert!(r.converged, "grad norm {} after {}", r.grad_norm, r.iterations);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn already_optimal_start_returns_immediately() {
        let f = |x: &[f64]| -(x[0] * x[0]);
        let fg = |x: &[f64]| (-(x[0] * x[0]), vec![-2.0 * x[0]]);
        let r = maximize(&[0.0], f, fg, always, 100, 1e-8);
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.trace, vec![0.0]);
    }

    #[test]
    fn iterates_respect_the_feasible_region() {
        // Optimum of the unconstrained problem sits at 2, outside the
        // feasible half-line x < 1; every accepted iterate must stay inside
        // and convergence must be reported honestly as not reached.
        let f = |x: &[f64]| -(x[0] - 2.0) * (x[0] - 2.0);
        let fg = |x: &[f64]| (f(x), vec![-2.0 * (x[0] - 2.0)]);
        let inside = |x: &[f64]| x[0] < 1.0;
        let r = maximize(&[0.0], f, fg, inside, 60, 1e-8);
        assert!(r.x[0] < 1.0);
        assert!(!r.converged);
        assert!(r.value <= -1.0 + 1e-9);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn rescue_recovers_from_misleading_gradients() {
        // The reported gradient points away from the maximum, so every
        // line search fails and the direct-search fallback has to carry
        // the solver to the optimum.
        let f = |x: &[f64]| -(x[0] * x[0] + x[1] * x[1]);
        let fg = |x: &[f64]| (f(x), vec![2.0 * x[0], 2.0 * x[1]]);
        let r = maximize(&[1.0, -0.75], f, fg, always, 100, 1e-2);
        assert!(r.rescues > 0, "fallback never engaged");
        assert!(r.value > -1e-3, "value {}", r.value);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }
}

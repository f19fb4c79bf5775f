//! Scaled conjugate gradient minimiser (Møller's method, netlab flavour).
//!
//! No line search: each iteration estimates curvature along the search
//! direction from one extra gradient evaluation and controls the step with
//! a Levenberg–Marquardt style scale `β`. Steps that do not reduce the
//! objective are rejected, so the accepted sequence is monotone.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScgOptions {
    pub max_iter: usize,
    /// Converged once `‖∇f‖∞` drops below this.
    pub grad_tol: f64,
}

impl Default for ScgOptions {
    fn default() -> Self {
        ScgOptions { max_iter: 200, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScgReport<T> {
    pub x: Vec<T>,
    pub objective: T,
    pub gradient: Vec<T>,
    pub initial_objective: T,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterRecord>,
}

pub fn inf_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

fn axpy<T: Real>(x: &[T], a: T, d: &[T]) -> Vec<T> {
    x.iter().zip(d).map(|(&xi, &di)| xi + a * di).collect()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    crate::linalg::dot(a, b)
}

const STALL_STEP: f64 = 1e-14;

/// Minimises `f`, which returns the objective and its gradient.
pub fn minimize<T, F>(mut f: F, x0: Vec<T>, opts: &ScgOptions) -> Result<ScgReport<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let n = x0.len();
    let sigma0 = T::lit(1e-4);
    let beta_min = T::lit(1e-15);
    let beta_max = T::lit(1e100);
    let tol = T::lit(opts.grad_tol);

    let (mut f_old, mut g_new) = f(&x0)?;
    if !f_old.is_finite() {
        return Err(Error::Optimization("objective not finite at the starting point".into()));
    }
    let f_initial = f_old;
    let mut x = x0;
    let mut g_old = g_new.clone();
    let mut d: Vec<T> = g_new.iter().map(|&g| -g).collect();
    let mut success = true;
    let mut n_success = 0usize;
    let mut beta = T::one();
    let (mut mu, mut kappa, mut theta) = (T::zero(), T::zero(), T::zero());
    let mut trace = vec![IterRecord { iter: 0, objective: f_old.to_f64_lossy(), grad_norm: inf_norm(&g_new).to_f64_lossy() }];
    let mut converged = inf_norm(&g_new) < tol;
    let mut iter = 0;

    while !converged && iter < opts.max_iter {
        iter += 1;
        if success {
            mu = dot(&d, &g_new);
            if mu >= T::zero() {
                d = g_new.iter().map(|&g| -g).collect();
                mu = dot(&d, &g_new);
            }
            kappa = dot(&d, &d);
            if kappa < T::epsilon() {
                converged = inf_norm(&g_new) < tol;
                break;
            }
            let sigma = sigma0 / kappa.sqrt();
            theta = match f(&axpy(&x, sigma, &d)) {
                Ok((_, g_plus)) => {
                    let diff: Vec<T> = g_plus.iter().zip(&g_new).map(|(&a, &b)| a - b).collect();
                    dot(&d, &diff) / sigma
                }
                Err(_) => T::zero(),
            };
        }

        // Scale the curvature estimate to keep it positive.
        let mut delta = theta + beta * kappa;
        if delta <= T::zero() {
            delta = beta * kappa;
            beta = beta - theta / kappa;
        }
        let alpha = -mu / delta;

        let x_new = axpy(&x, alpha, &d);
        let eval = f(&x_new).ok().filter(|(fv, g)| fv.is_finite() && g.iter().all(|v| v.is_finite()));
        let comparison = match &eval {
            Some((f_new, _)) => T::lit(2.0) * (*f_new - f_old) / (alpha * mu),
            None => -T::one(),
        };
        if comparison >= T::zero() {
            let (f_new, g) = eval.expect("accepted step has an evaluation");
            success = true;
            n_success += 1;
            x = x_new;
            f_old = f_new;
            g_old = std::mem::replace(&mut g_new, g);
        } else {
            success = false;
            // Rejected steps this small mean the objective is flat to
            // round-off along `d`; further scaling cannot help.
            let step = inf_norm(&d) * alpha.abs();
            if step <= T::lit(STALL_STEP) * (T::one() + inf_norm(&x)) {
                break;
            }
        }

        if comparison < T::lit(0.25) {
            beta = (beta * T::lit(4.0)).min(beta_max);
        }
        if comparison > T::lit(0.75) {
            beta = (beta * T::lit(0.5)).max(beta_min);
        }

        trace.push(IterRecord { iter, objective: f_old.to_f64_lossy(), grad_norm: inf_norm(&g_new).to_f64_lossy() });
        if inf_norm(&g_new) < tol {
            converged = true;
            break;
        }
        if beta >= beta_max {
            break;
        }

        if n_success == n {
            d = g_new.iter().map(|&g| -g).collect();
            n_success = 0;
        } else if success {
            let diff: Vec<T> = g_old.iter().zip(&g_new).map(|(&a, &b)| a - b).collect();
            let gamma = dot(&diff, &g_new) / mu;
            d = d.iter().zip(&g_new).map(|(&di, &gi)| gamma * di - gi).collect();
        }
    }

    Ok(ScgReport {
        x,
        objective: f_old,
        gradient: g_new,
        initial_objective: f_initial,
        iterations: iter,
        converged,
        trace,
    })
}

//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Small unconstrained problems only: the λ fit is one-dimensional (in log
//! space) and the calibration-table check is a few dozen logits. The two-loop
//! recursion keeps the last `memory` curvature pairs. Every accepted step
//! satisfies the Armijo sufficient-decrease test (so the recorded loss
//! trajectory is non-increasing by construction) and, except when the zoom
//! phase bottoms out, the strong curvature condition — which keeps s·y > 0
//! and the inverse-Hessian model usable.

use crate::numeric::{dot, inf_norm};
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Stop when the gradient sup-norm drops below this.
    pub grad_tol: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Strong-Wolfe curvature constant.
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            grad_tol: 1e-8,
            max_iterations: 200,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Accepted steps taken (0 if the start point already met the tolerance).
    pub iterations: usize,
    pub converged: bool,
    /// Loss after each accepted step, initial point included. Non-increasing.
    pub trajectory: Vec<f64>,
    /// The iterate after each accepted step, initial point included.
    pub iterates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("non-finite gradient component at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Minimize `objective` (returning loss and gradient) from `x0`.
pub fn minimize<F>(
    mut objective: F,
    x0: Vec<f64>,
    options: &LbfgsOptions,
) -> Result<Solution, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut loss, mut grad) = checked(&mut objective, &x, 0)?;
    let mut trajectory = vec![loss];
    let mut iterates = vec![x.clone()];
    let mut pairs: VecDeque<CurvaturePair> = VecDeque::with_capacity(options.memory);
    let mut converged = inf_norm(&grad) <= options.grad_tol;
    let mut iterations = 0;

    while !converged && iterations < options.max_iterations {
        let mut direction = two_loop(&grad, &pairs);
        let mut slope = dot(&direction, &grad);
        if slope >= 0.0 {
            // stale curvature produced an ascent direction; fall back to
            // steepest descent
            pairs.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = dot(&direction, &grad);
        }

        let accepted =
            wolfe_search(&mut objective, &x, loss, slope, &direction, iterations, options)?;
        let Some((new_x, new_loss, new_grad)) = accepted else {
            break; // line search stalled; report the best point found
        };

        let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let curvature_floor = 1e-10 * l2(&s) * l2(&y);
        if sy > curvature_floor {
            if pairs.len() == options.memory {
                pairs.pop_front();
            }
            pairs.push_back(CurvaturePair { rho: 1.0 / sy, s, y });
        }

        x = new_x;
        loss = new_loss;
        grad = new_grad;
        iterations += 1;
        trajectory.push(loss);
        iterates.push(x.clone());
        converged = inf_norm(&grad) <= options.grad_tol;
    }

    Ok(Solution { x, loss, gradient: grad, iterations, converged, trajectory, iterates })
}

fn checked<F>(objective: &mut F, x: &[f64], iteration: usize) -> Result<(f64, Vec<f64>), OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (loss, grad) = objective(x);
    if !loss.is_finite() {
        return Err(OptimError::NonFiniteLoss { iteration, loss });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient { iteration });
    }
    Ok((loss, grad))
}

struct Trial {
    step: f64,
    x: Vec<f64>,
    loss: f64,
    grad: Vec<f64>,
    slope: f64,
}

type Accepted = Option<(Vec<f64>, f64, Vec<f64>)>;

/// Strong-Wolfe line search: bracket a step satisfying both conditions, then
/// bisect into it. Falls back to the best Armijo-satisfying trial when the
/// evaluation budget runs out; `None` only when no trial decreased the loss.
fn wolfe_search<F>(
    objective: &mut F,
    x: &[f64],
    loss0: f64,
    slope0: f64,
    direction: &[f64],
    iteration: usize,
    options: &LbfgsOptions,
) -> Result<Accepted, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut evals = 0;
    let eval = |step: f64, objective: &mut F| -> Result<Trial, OptimError> {
        let x_new: Vec<f64> = x.iter().zip(direction).map(|(xi, di)| xi + step * di).collect();
        let (loss, grad) = checked(objective, &x_new, iteration + 1)?;
        let slope = dot(&grad, direction);
        Ok(Trial { step, x: x_new, loss, grad, slope })
    };
    let armijo = |t: &Trial| t.loss <= loss0 + options.c1 * t.step * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= options.c2 * slope0.abs();

    let mut best: Option<Trial> = None;
    let mut keep_best = |t: &Trial| {
        if armijo(t) && best.as_ref().is_none_or(|b| t.loss < b.loss) {
            best = Some(Trial { grad: t.grad.clone(), x: t.x.clone(), ..*t });
        }
    };

    // bracketing phase
    let mut prev_step = 0.0;
    let mut prev_loss = loss0;
    let mut step = 1.0;
    let mut bracket: Option<(f64, f64, f64)> = None; // (lo, f_lo, hi)
    for round in 0.. {
        let t = eval(step, objective)?;
        evals += 1;
        if !armijo(&t) || (round > 0 && t.loss >= prev_loss) {
            bracket = Some((prev_step, prev_loss, t.step));
            break;
        }
        keep_best(&t);
        if curvature(&t) {
            return Ok(Some((t.x, t.loss, t.grad)));
        }
        if t.slope >= 0.0 {
            bracket = Some((t.step, t.loss, prev_step));
            break;
        }
        if evals >= options.max_line_evals || step >= 1e12 {
            break;
        }
        prev_step = t.step;
        prev_loss = t.loss;
        step *= 2.0;
    }

    // zoom phase: bisect the bracket
    if let Some((mut lo, mut f_lo, mut hi)) = bracket {
        while evals < options.max_line_evals && (hi - lo).abs() > 1e-16 * (1.0 + lo.abs()) {
            let t = eval(0.5 * (lo + hi), objective)?;
            evals += 1;
            keep_best(&t);
            if !armijo(&t) || t.loss >= f_lo {
                hi = t.step;
                continue;
            }
            if curvature(&t) {
                return Ok(Some((t.x, t.loss, t.grad)));
            }
            if t.slope * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = t.step;
            f_lo = t.loss;
        }
    }

    Ok(best.map(|t| (t.x, t.loss, t.grad)))
}

/// Two-loop recursion: returns −H·g with H the implicit L-BFGS inverse
/// Hessian, scaled by the most recent pair's γ = s·y / y·y.
fn two_loop(grad: &[f64], pairs: &VecDeque<CurvaturePair>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for pair in pairs.iter().rev() {
        let alpha = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }

    let gamma = pairs
        .back()
        .map(|p| dot(&p.s, &p.y) / dot(&p.y, &p.y))
        .filter(|g| g.is_finite() && *g > 0.0)
        .unwrap_or(1.0);
    for qi in q.iter_mut() {
        *qi *= gamma;
    }

    for (pair, alpha) in pairs.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (alpha - beta) * si;
        }
    }

    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

fn l2(xs: &[f64]) -> f64 {
    dot(xs, xs).sqrt()
}

//! Lower-level solves: damped Newton on `f̃_r^ρ(x, ·, s)` for fixed `s`,
//! and a path solver for the full smoothed system `C^{r,ρ}(x, y, s) = 0`.

use serde::Serialize;

use crate::error::{check_len, Result};
use crate::numkit::{dot, norm2, sym_eigenvalues, DenseMatrix, LuFactor};
use crate::problem::BilevelProblem;
use crate::smoothing::{eval_c, eval_sbal, smoothing_eval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InnerStatus {
    Converged,
    MaxIterations,
    LineSearchStall,
    SingularHessian,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerResult {
    pub y: Vec<f64>,
    /// `‖φ‖₂` at the returned `y`.
    pub phi_norm: f64,
    pub iterations: usize,
    pub status: InnerStatus,
    /// Length of the last accepted step (0 when no step was taken).
    pub last_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub max_iter: usize,
    pub armijo_slope: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
    pub shift_start: f64,
    pub shift_factor: f64,
    pub max_shifts: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            armijo_slope: 1e-4,
            backtrack: 0.5,
            max_halvings: 60,
            shift_start: 1e-6,
            shift_factor: 10.0,
            max_shifts: 8,
        }
    }
}

/// Newton direction on `H p = −grad`, shifting `H + τI` until the
/// factorization succeeds and the direction descends. `None` when every
/// shift fails.
fn newton_direction(hess: &DenseMatrix, grad: &[f64], opts: &InnerOptions) -> Option<Vec<f64>> {
    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
    let n = grad.len();
    let mut shift = 0.0;
    for attempt in 0..=opts.max_shifts {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += shift;
        }
        if let Ok(lu) = LuFactor::new(&h) {
            let p = lu.solve_vec(&neg);
            if p.iter().all(|v| v.is_finite()) && dot(&p, grad) < 0.0 {
                return Some(p);
            }
        }
        shift = if attempt == 0 { opts.shift_start } else { shift * opts.shift_factor };
    }
    None
}

/// The smallest relative change of `f̃` that floating point resolves; below
/// it the line search judges progress by `‖φ‖` instead.
const ROUNDOFF: f64 = 1e-14;

/// Approximately minimizes `f̃_r^ρ(x, ·, s)` until `‖φ‖₂ ≤ gamma`.
///
/// Damped Newton with Armijo backtracking on `f̃`. When the predicted
/// decrease drops below what `f̃` can resolve in floating point, a step is
/// accepted only if it halves `‖φ‖`; otherwise the solve reports a stall
/// instead of spending its iteration budget on rounding noise.
#[allow(clippy::too_many_arguments)]
pub fn minimize_y(
    prob: &BilevelProblem,
    x: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
    y_start: &[f64],
    gamma: f64,
    opts: &InnerOptions,
) -> Result<InnerResult> {
    check_len("y_start", y_start, prob.dims().l)?;
    let l = prob.dims().l;
    let mut y = y_start.to_vec();
    let mut cur = eval_sbal(prob, x, &y, s, r, rho)?;
    let mut last_step = 0.0;
    let finish = |y: Vec<f64>, phi: &[f64], iterations, status, last_step| InnerResult {
        y,
        phi_norm: norm2(phi),
        iterations,
        status,
        last_step,
    };

    for it in 0..opts.max_iter {
        let gnorm = norm2(&cur.grad_y);
        if gnorm <= gamma {
            return Ok(finish(y, &cur.grad_y, it, InnerStatus::Converged, last_step));
        }
        let hess = smoothing_eval(prob, x, &y, s, r, rho)?.jac_ys.block(0, 0, l, l);
        let newton = newton_direction(&hess, &cur.grad_y, opts);
        let used_newton = newton.is_some();
        let p = newton.unwrap_or_else(|| cur.grad_y.iter().map(|g| -g).collect());
        let slope = dot(&cur.grad_y, &p);
        let tiny = -slope <= ROUNDOFF * (1.0 + cur.value.abs());

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            if let Ok(e) = eval_sbal(prob, x, &trial, s, r, rho) {
                let ok = if tiny {
                    norm2(&e.grad_y) <= 0.5 * gnorm
                } else {
                    e.value <= cur.value + opts.armijo_slope * alpha * slope && e.value < cur.value
                };
                if ok {
                    accepted = Some((trial, e));
                    break;
                }
            }
            alpha *= opts.backtrack;
        }
        match accepted {
            Some((trial, e)) => {
                last_step = alpha * norm2(&p);
                y = trial;
                cur = e;
            }
            None => {
                let status = if used_newton {
                    InnerStatus::LineSearchStall
                } else {
                    InnerStatus::SingularHessian
                };
                return Ok(finish(y, &cur.grad_y, it, status, last_step));
            }
        }
    }
    let status = if norm2(&cur.grad_y) <= gamma {
        InnerStatus::Converged
    } else {
        InnerStatus::MaxIterations
    };
    Ok(finish(y, &cur.grad_y, opts.max_iter, status, last_step))
}

/// Curvature report for the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    /// Smallest eigenvalue of `∇_y φ`, or `−∞` if it cannot be computed.
    pub hessian_min_eig: f64,
    /// Length of the undamped Newton step on `φ` from this point.
    pub step_norm: f64,
    /// `max_i r / z_i²`, the curvature of the log barrier in the slack
    /// variables before they are eliminated.
    pub barrier_curvature: f64,
}

pub fn inner_step_diagnostics(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> StepDiagnostics {
    let l = prob.dims().l;
    let Ok(e) = smoothing_eval(prob, x, y, s, r, rho) else {
        return StepDiagnostics {
            hessian_min_eig: f64::NEG_INFINITY,
            step_norm: f64::NAN,
            barrier_curvature: f64::NAN,
        };
    };
    let hess = e.jac_ys.block(0, 0, l, l);
    let hessian_min_eig = sym_eigenvalues(&hess).first().copied().unwrap_or(f64::INFINITY);
    let step_norm = if e.phi.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        match LuFactor::new(&hess) {
            Ok(lu) => norm2(&lu.solve_vec(&e.phi)),
            Err(_) => f64::INFINITY,
        }
    };
    let barrier_curvature = e.zk.z.iter().map(|z| r / (z * z)).fold(0.0, f64::max);
    StepDiagnostics {
        hessian_min_eig,
        step_norm,
        barrier_curvature,
    }
}

/// A point on (or near) the smoothed solution map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathPoint {
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    /// `‖C‖_∞` at `(y, s)`.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOptions {
    pub tol: f64,
    pub newton_iter: usize,
    pub outer_loops: usize,
    pub inner: InnerOptions,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            newton_iter: 50,
            outer_loops: 500,
            inner: InnerOptions::default(),
        }
    }
}

fn inf(v: &[f64]) -> f64 {
    crate::numkit::inf_norm(v)
}

/// Damped Newton on `C(x, ·, ·) = 0` with merit `‖C‖₂`.
fn newton_on_c(
    prob: &BilevelProblem,
    x: &[f64],
    r: f64,
    rho: f64,
    y: &mut Vec<f64>,
    s: &mut Vec<f64>,
    opts: &PathOptions,
) -> Result<f64> {
    let l = y.len();
    let mut c = eval_c(prob, x, y, s, r, rho)?;
    for _ in 0..opts.newton_iter {
        if inf(&c) <= opts.tol {
            break;
        }
        let e = smoothing_eval(prob, x, y, s, r, rho)?;
        let Ok(lu) = LuFactor::new(&e.jac_ys) else {
            break;
        };
        let step = lu.solve_vec(&c.iter().map(|v| -v).collect::<Vec<_>>());
        let base = norm2(&c);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let ty: Vec<f64> = y.iter().zip(&step[..l]).map(|(a, b)| a + alpha * b).collect();
            let ts: Vec<f64> = s.iter().zip(&step[l..]).map(|(a, b)| a + alpha * b).collect();
            if let Ok(tc) = eval_c(prob, x, &ty, &ts, r, rho) {
                if norm2(&tc) <= (1.0 - 1e-4 * alpha) * base {
                    *y = ty;
                    *s = ts;
                    c = tc;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(inf(&c))
}

/// Solves `C^{r,ρ}(x, y, s) = 0` from `(y0, s0)`.
///
/// Newton on `C` first; if that stalls, the augmented-Lagrangian loop
/// (minimize in `y`, then `s ← κ/ρ`) pulls the iterate closer and Newton is
/// retried.
#[allow(clippy::too_many_arguments)]
pub fn solve_path(
    prob: &BilevelProblem,
    x: &[f64],
    r: f64,
    rho: f64,
    y0: &[f64],
    s0: &[f64],
    opts: &PathOptions,
) -> Result<PathPoint> {
    check_len("y0", y0, prob.dims().l)?;
    check_len("s0", s0, prob.dims().m)?;
    let mut y = y0.to_vec();
    let mut s = s0.to_vec();
    let mut res = newton_on_c(prob, x, r, rho, &mut y, &mut s, opts)?;
    let mut loops = 0;
    while res > opts.tol && loops < opts.outer_loops {
        loops += 1;
        let inner = minimize_y(prob, x, &s, r, rho, &y, opts.tol, &opts.inner)?;
        y = inner.y;
        let e = eval_sbal(prob, x, &y, &s, r, rho)?;
        s = e.zk.kappa.iter().map(|k| k / rho).collect();
        res = newton_on_c(prob, x, r, rho, &mut y, &mut s, opts)?;
    }
    Ok(PathPoint {
        converged: res <= opts.tol,
        y,
        s,
        residual: res,
    })
}

/// Follows the smoothed path from `r = 1` down to `r_target` by factors of
/// ten, warm-starting each solve from the previous one.
#[allow(clippy::too_many_arguments)]
pub fn follow_path(
    prob: &BilevelProblem,
    x: &[f64],
    r_target: f64,
    rho: f64,
    y0: &[f64],
    s0: &[f64],
    opts: &PathOptions,
) -> Result<PathPoint> {
    let mut r = 1.0f64.max(r_target);
    let mut point = solve_path(prob, x, r, rho, y0, s0, opts)?;
    while r > r_target {
        r = (r * 0.1).max(r_target);
        point = solve_path(prob, x, r, rho, &point.y, &point.s, opts)?;
    }
    Ok(point)
}

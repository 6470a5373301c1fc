use ebsa_core::numkit::{central_diff_jacobian_scaled, DenseMatrix};
use ebsa_core::problem::{relative_error, sample_points, validate_derivatives};
use ebsa_core::smoothing::{eval_c, eval_sbal, sensitivity, sensitivity_via_jacobian, smoothing_eval};
use ebsa_core::BilevelProblem;
use serde::Serialize;

/// Barrier and penalty parameters for the smoothing checks; well inside the
/// smooth regime so central differences are trustworthy.
const CHECK_R: f64 = 0.1;
const CHECK_RHO: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub problem: String,
    pub check: String,
    pub max_error: f64,
    pub passed: bool,
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Deterministic multiplier estimates in `[0, 1)` for the sample points.
fn sample_s(m: usize, k: usize) -> Vec<f64> {
    (0..m).map(|i| ((0.37 * (k + 1) as f64 + 0.61 * (i + 1) as f64) % 1.0).abs()).collect()
}

/// Supplied derivatives plus the smoothing calculus at `points` random points.
pub fn check_problem(prob: &BilevelProblem, tol: f64, points: usize, seed: u64) -> Vec<CheckRow> {
    let pts = sample_points(prob, points, seed);
    let deriv = validate_derivatives(prob, &pts, tol);
    let mut rows: Vec<CheckRow> = deriv
        .checks
        .iter()
        .map(|c| CheckRow {
            problem: prob.name().to_string(),
            check: c.name.clone(),
            max_error: c.max_rel_error,
            passed: c.passed,
        })
        .collect();

    let names = [
        "z*kappa = r*rho",
        "z + g = kappa - rho*s",
        "jac_ys vs differences",
        "jac_x vs differences",
        "sbal grad_y vs differences",
        "sbal grad_s vs differences",
        "Btilde block symmetric",
        "sensitivity routes agree",
    ];
    let mut worst = [0.0f64; 8];
    let (r, rho) = (CHECK_R, CHECK_RHO);
    let l = prob.dims().l;
    let nan_vec = |n: usize| vec![f64::NAN; n];
    for (k, (x, y)) in pts.iter().enumerate() {
        let s = sample_s(prob.dims().m, k);
        let e = match smoothing_eval(prob, x, y, &s, r, rho) {
            Ok(e) => e,
            Err(_) => {
                worst.iter_mut().for_each(|w| *w = f64::INFINITY);
                continue;
            }
        };
        let mut update = |i: usize, v: f64| worst[i] = worst[i].max(if v.is_nan() { f64::INFINITY } else { v });

        let g = prob.eval_lower_value(x, y).map(|(_, g)| g).unwrap_or_default();
        for i in 0..s.len() {
            let (z, kap) = (e.zk.z[i], e.zk.kappa[i]);
            update(0, (z * kap - r * rho).abs() / (r * rho).max(1.0));
            let scale = 1.0 + g[i].abs() + rho * s[i].abs();
            update(1, ((z + g[i]) - (kap - rho * s[i])).abs() / scale);
        }

        let n_c = l + s.len();
        let ys = concat(y, &s);
        let fd_ys = central_diff_jacobian_scaled(
            |v| eval_c(prob, x, &v[..l], &v[l..], r, rho).unwrap_or_else(|_| nan_vec(n_c)),
            &ys,
        );
        update(2, fd_ys.map(|fd| relative_error(&e.jac_ys, &fd)).unwrap_or(f64::INFINITY));
        let fd_x = central_diff_jacobian_scaled(
            |v| eval_c(prob, v, y, &s, r, rho).unwrap_or_else(|_| nan_vec(n_c)),
            x,
        );
        update(3, fd_x.map(|fd| relative_error(&e.jac_x, &fd)).unwrap_or(f64::INFINITY));

        if let Ok(sb) = eval_sbal(prob, x, y, &s, r, rho) {
            let gy = central_diff_jacobian_scaled(
                |v| vec![eval_sbal(prob, x, v, &s, r, rho).map(|e| e.value).unwrap_or(f64::NAN)],
                y,
            );
            update(
                4,
                gy.map(|fd| relative_error(&DenseMatrix::from_row_major(1, l, sb.grad_y.clone()), &fd))
                    .unwrap_or(f64::INFINITY),
            );
            if !s.is_empty() {
                let gs = central_diff_jacobian_scaled(
                    |v| vec![eval_sbal(prob, x, y, v, r, rho).map(|e| e.value).unwrap_or(f64::NAN)],
                    &s,
                );
                update(
                    5,
                    gs.map(|fd| relative_error(&DenseMatrix::from_row_major(1, s.len(), sb.grad_s.clone()), &fd))
                        .unwrap_or(f64::INFINITY),
                );
            }
        } else {
            update(4, f64::INFINITY);
        }

        let block = e.btilde_mat.block(0, 0, l, l);
        update(6, block.sub(&block.transpose()).max_abs() / block.max_abs().max(1.0));

        // A singular system at a random point is not a calculus error.
        if let (Ok(a), Ok(b)) = (
            sensitivity(prob, x, y, &s, r, rho),
            sensitivity_via_jacobian(prob, x, y, &s, r, rho),
        ) {
            update(7, relative_error(&a.v, &b.v));
        }
    }
    // The identities are exact algebra and do not depend on supplied derivatives.
    let limits = [1e-9, 1e-9, tol, tol, tol, tol, 1e-10, tol];
    for ((name, w), lim) in names.iter().zip(worst).zip(limits) {
        rows.push(CheckRow {
            problem: prob.name().to_string(),
            check: (*name).to_string(),
            max_error: w,
            passed: w <= lim,
        });
    }
    rows
}

/// Plain-text table of rows.
pub fn format_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.problem.len()).max().unwrap_or(7).max(7);
    let cw = rows.iter().map(|r| r.check.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:width$}  {:cw$}  {:>10}  result\n", "problem", "check", "max_error");
    for r in rows {
        out.push_str(&format!(
            "{:width$}  {:cw$}  {:>10.2e}  {}\n",
            r.problem,
            r.check,
            r.max_error,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

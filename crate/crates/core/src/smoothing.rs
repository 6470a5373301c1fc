//! Smoothing barrier augmented Lagrangian (SBAL) calculus.
//!
//! For a lower-level constraint `g_i` with multiplier surrogate `s_i`, barrier
//! `r` and penalty `ρ`, write `t_i = ρ s_i + g_i`. The slack and multiplier
//! functions are
//!
//! ```text
//!   z_i = ½(√(t_i² + 4rρ) − t_i),   κ_i = ½(√(t_i² + 4rρ) + t_i),
//! ```
//!
//! so `z_i κ_i = rρ` and `z_i + g_i = κ_i − ρ s_i`. The smoothed KKT residual
//! is `C = (φ, ψ)` with `φ = ∇_y f + Σ (κ_i/ρ) ∇_y g_i` and `ψ = z + g`; its
//! zeros `(y_r^ρ(x), s_r^ρ(x))` form the smoothed solution map.

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::numkit::{solve_dense, DenseMatrix};
use crate::problem::{BilevelProblem, Dims, LowerDerivs, LowerFirstOrder};

/// Slack and multiplier surrogates for every lower constraint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZKPair {
    pub z: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl ZKPair {
    /// `z_i + κ_i`, i.e. `√(t_i² + 4rρ)`.
    pub fn sum(&self) -> Vec<f64> {
        self.z.iter().zip(&self.kappa).map(|(z, k)| z + k).collect()
    }
}

fn check_params(r: f64, rho: f64, smooth: bool) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    if smooth {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "r must be positive in the smooth regime, got {r}"
            )));
        }
    } else if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("r must be nonnegative, got {r}")));
    }
    Ok(())
}

/// One `(z, κ)` pair without cancellation: the root of the larger branch is
/// computed directly and the other from `zκ = rρ`.
fn zk_scalar(g: f64, s: f64, r: f64, rho: f64) -> (f64, f64) {
    let t = rho * s + g;
    if r == 0.0 {
        return ((-t).max(0.0), t.max(0.0));
    }
    let rr = r * rho;
    let root = t.hypot(2.0 * rr.sqrt());
    if t > 0.0 {
        let z = 2.0 * rr / (root + t);
        (z, z + t)
    } else {
        let k = 2.0 * rr / (root - t);
        (k - t, k)
    }
}

pub fn eval_zk(g: &[f64], s: &[f64], r: f64, rho: f64) -> Result<ZKPair> {
    check_params(r, rho, false)?;
    check_len("s", s, g.len())?;
    let (z, kappa) = g.iter().zip(s).map(|(&g, &s)| zk_scalar(g, s, r, rho)).unzip();
    Ok(ZKPair { z, kappa })
}

/// Derivatives of `z` and `κ`. Row `i` of each matrix is the gradient of
/// `z_i` (or `κ_i`); the s-derivatives are diagonal and stored as vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ZKGrads {
    pub z_x: DenseMatrix,
    pub z_y: DenseMatrix,
    pub kappa_x: DenseMatrix,
    pub kappa_y: DenseMatrix,
    pub z_s: Vec<f64>,
    pub kappa_s: Vec<f64>,
}

fn check_point(prob: &BilevelProblem, x: &[f64], y: &[f64], s: &[f64]) -> Result<()> {
    let Dims { d, l, m, .. } = prob.dims();
    check_len("x", x, d)?;
    check_len("y", y, l)?;
    check_len("s", s, m)
}

pub fn eval_zk_grads(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> Result<ZKGrads> {
    check_params(r, rho, true)?;
    check_point(prob, x, y, s)?;
    let low = prob.eval_lower_first(x, y)?;
    let zk = eval_zk(&low.g, s, r, rho)?;
    let Dims { d, l, m, .. } = prob.dims();
    let mut out = ZKGrads {
        z_x: DenseMatrix::zeros(m, d),
        z_y: DenseMatrix::zeros(m, l),
        kappa_x: DenseMatrix::zeros(m, d),
        kappa_y: DenseMatrix::zeros(m, l),
        z_s: vec![0.0; m],
        kappa_s: vec![0.0; m],
    };
    for (i, sum) in zk.sum().into_iter().enumerate() {
        let (z, k) = (zk.z[i], zk.kappa[i]);
        for j in 0..d {
            let gx = low.jac_x_g[(i, j)];
            out.z_x[(i, j)] = -z / sum * gx;
            out.kappa_x[(i, j)] = k / sum * gx;
        }
        for j in 0..l {
            let gy = low.jac_y_g[(i, j)];
            out.z_y[(i, j)] = -z / sum * gy;
            out.kappa_y[(i, j)] = k / sum * gy;
        }
        out.z_s[i] = -rho * z / sum;
        out.kappa_s[i] = rho * k / sum;
    }
    Ok(out)
}

/// Value and gradients of `f̃_r^ρ(x, ·, ·)` with `z` eliminated.
#[derive(Debug, Clone, PartialEq)]
pub struct SbalEval {
    pub value: f64,
    /// `φ`.
    pub grad_y: Vec<f64>,
    /// `ψ = z + g`.
    pub grad_s: Vec<f64>,
    pub zk: ZKPair,
    pub g: Vec<f64>,
}

fn phi(low: &LowerFirstOrder, kappa: &[f64], rho: f64) -> Vec<f64> {
    let mult: Vec<f64> = kappa.iter().map(|k| k / rho).collect();
    let mut out = low.grad_y_f.clone();
    for (o, v) in out.iter_mut().zip(low.jac_y_g.tr_mul_vec(&mult)) {
        *o += v;
    }
    out
}

pub fn eval_sbal(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> Result<SbalEval> {
    check_params(r, rho, true)?;
    check_point(prob, x, y, s)?;
    let low = prob.eval_lower_first(x, y)?;
    let zk = eval_zk(&low.g, s, r, rho)?;
    let mut value = low.f;
    for i in 0..low.g.len() {
        let ps = zk.z[i] + low.g[i];
        value += -r * zk.z[i].ln() + s[i] * ps + ps * ps / (2.0 * rho);
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteEvaluation("smoothed lower objective".into()));
    }
    let grad_s = zk.z.iter().zip(&low.g).map(|(z, g)| z + g).collect();
    Ok(SbalEval {
        value,
        grad_y: phi(&low, &zk.kappa, rho),
        grad_s,
        zk,
        g: low.g,
    })
}

/// `C^{r,ρ}(x, y, s) = (φ; ψ)`. Valid at `r = 0`, where a zero of `C` is a
/// KKT pair of the lower problem.
pub fn eval_c(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> Result<Vec<f64>> {
    check_params(r, rho, false)?;
    check_point(prob, x, y, s)?;
    let low = prob.eval_lower_first(x, y)?;
    let zk = eval_zk(&low.g, s, r, rho)?;
    let mut out = phi(&low, &zk.kappa, rho);
    out.extend(zk.z.iter().zip(&low.g).map(|(z, g)| z + g));
    Ok(out)
}

/// Everything the sensitivity and inner solvers need at one point.
#[derive(Debug, Clone)]
pub struct SmoothingEval {
    pub zk: ZKPair,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// Diagonal of `W`, `w_i = z_i / (z_i + κ_i/ρ)`.
    pub w: Vec<f64>,
    /// `∇_{(y,s)} C`, `(l+m) x (l+m)`.
    pub jac_ys: DenseMatrix,
    /// `∇_x C`, `(l+m) x d`.
    pub jac_x: DenseMatrix,
    pub btilde_mat: DenseMatrix,
    pub btilde_vec: DenseMatrix,
}

impl SmoothingEval {
    pub fn residual(&self) -> Vec<f64> {
        self.phi.iter().chain(&self.psi).copied().collect()
    }
}

/// `w_i = z_i / (z_i + κ_i/ρ)`. Equals `−g_i/(s_i − g_i)` on the smoothed
/// path and stays in `[0, 1]` everywhere.
pub fn w_diag(zk: &ZKPair, rho: f64) -> Vec<f64> {
    zk.z
        .iter()
        .zip(&zk.kappa)
        .map(|(&z, &k)| {
            let den = z + k / rho;
            if den > 0.0 {
                (z / den).clamp(0.0, 1.0)
            } else {
                // r = 0 and t = 0: both vanish; treat as active.
                0.0
            }
        })
        .collect()
}

/// `∇²_yy f + Σ mult_i ∇²_yy g_i` (symmetrized) and the matching xy block.
fn weighted_hessians(low: &LowerDerivs, mult: &[f64]) -> (DenseMatrix, DenseMatrix) {
    let mut hyy = low.hess_yy_f.clone();
    let mut hxy = low.hess_xy_f.clone();
    for (i, &u) in mult.iter().enumerate() {
        hyy.add_scaled(u, &low.hess_yy_g[i]);
        hxy.add_scaled(u, &low.hess_xy_g[i]);
    }
    hyy.symmetrize();
    (hyy, hxy)
}

/// The block system `[[Hyy, ∇_y gᵀ], [(W−I)∇_y g, W]]` and right-hand side
/// `[Hxy; (W−I)∇_x g]` shared by the smoothed sensitivity and its limit.
fn assemble_b(low: &LowerDerivs, mult: &[f64], w: &[f64]) -> (DenseMatrix, DenseMatrix) {
    let (l, d) = (low.hess_xy_f.rows(), low.hess_xy_f.cols());
    let m = w.len();
    let (hyy, hxy) = weighted_hessians(low, mult);
    let gy = &low.first.jac_y_g;
    let gx = &low.first.jac_x_g;
    let mut bmat = DenseMatrix::zeros(l + m, l + m);
    bmat.set_block(0, 0, &hyy);
    bmat.set_block(0, l, &gy.transpose());
    let mut bvec = DenseMatrix::zeros(l + m, d);
    bvec.set_block(0, 0, &hxy);
    for i in 0..m {
        let wm1 = w[i] - 1.0;
        for j in 0..l {
            bmat[(l + i, j)] = wm1 * gy[(i, j)];
        }
        bmat[(l + i, l + i)] = w[i];
        for j in 0..d {
            bvec[(l + i, j)] = wm1 * gx[(i, j)];
        }
    }
    (bmat, bvec)
}

fn jacobians(low: &LowerDerivs, zk: &ZKPair, rho: f64) -> (DenseMatrix, DenseMatrix) {
    let (l, d) = (low.hess_xy_f.rows(), low.hess_xy_f.cols());
    let m = zk.z.len();
    let mult: Vec<f64> = zk.kappa.iter().map(|k| k / rho).collect();
    let (mut hyy, mut hxy) = weighted_hessians(low, &mult);
    let gy = &low.first.jac_y_g;
    let gx = &low.first.jac_x_g;
    let sum = zk.sum();
    let mut jys = DenseMatrix::zeros(l + m, l + m);
    let mut jx = DenseMatrix::zeros(l + m, d);
    for i in 0..m {
        let ratio = zk.kappa[i] / sum[i];
        hyy.add_outer(ratio / rho, gy.row(i), gy.row(i));
        hxy.add_outer(ratio / rho, gy.row(i), gx.row(i));
        for j in 0..l {
            // ∇_s φ column i and ∇_y ψ row i.
            jys[(j, l + i)] = ratio * gy[(i, j)];
            jys[(l + i, j)] = ratio * gy[(i, j)];
        }
        jys[(l + i, l + i)] = -rho * zk.z[i] / sum[i];
        for j in 0..d {
            jx[(l + i, j)] = ratio * gx[(i, j)];
        }
    }
    jys.set_block(0, 0, &hyy);
    jx.set_block(0, 0, &hxy);
    (jys, jx)
}

/// `(∇_{(y,s)} C, ∇_x C)` in the smooth regime.
pub fn jac_c(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    smoothing_eval(prob, x, y, s, r, rho).map(|e| (e.jac_ys, e.jac_x))
}

pub fn smoothing_eval(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> Result<SmoothingEval> {
    check_params(r, rho, true)?;
    check_point(prob, x, y, s)?;
    let low = prob.eval_lower_derivs(x, y)?;
    let zk = eval_zk(&low.first.g, s, r, rho)?;
    let phi = phi(&low.first, &zk.kappa, rho);
    let psi = zk.z.iter().zip(&low.first.g).map(|(z, g)| z + g).collect();
    let w = w_diag(&zk, rho);
    let mult: Vec<f64> = zk.kappa.iter().map(|k| k / rho).collect();
    let (btilde_mat, btilde_vec) = assemble_b(&low, &mult, &w);
    let (jac_ys, jac_x) = jacobians(&low, &zk, rho);
    if !(jac_ys.is_finite() && jac_x.is_finite() && btilde_mat.is_finite() && btilde_vec.is_finite()) {
        return Err(Error::NonFiniteEvaluation("smoothed Jacobian".into()));
    }
    Ok(SmoothingEval {
        zk,
        phi,
        psi,
        w,
        jac_ys,
        jac_x,
        btilde_mat,
        btilde_vec,
    })
}

/// Implicit derivative of the smoothed solution map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    /// Stacked `(∇y_r^ρ(x); ∇s_r^ρ(x))`, `(l+m) x d`.
    pub vtilde: DenseMatrix,
    /// Top `l` rows of `vtilde`.
    pub v: DenseMatrix,
}

fn solve_sensitivity(bmat: &DenseMatrix, bvec: &DenseMatrix, l: usize) -> Result<Sensitivity> {
    let vtilde = solve_dense(bmat, &bvec.scale(-1.0)).map_err(|e| match e {
        Error::SingularMatrix { .. } => Error::SingularSensitivity,
        other => other,
    })?;
    if !vtilde.is_finite() {
        return Err(Error::SingularSensitivity);
    }
    let v = vtilde.block(0, 0, l, vtilde.cols());
    Ok(Sensitivity { vtilde, v })
}

/// Solves `b̃ + B̃ Ṽ = 0` at `(x, y, s)`.
pub fn sensitivity(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> Result<Sensitivity> {
    let e = smoothing_eval(prob, x, y, s, r, rho)?;
    solve_sensitivity(&e.btilde_mat, &e.btilde_vec, prob.dims().l)
}

/// The same derivative through `∇_{(y,s)} C · Ṽ = −∇_x C`. The two systems
/// are row-equivalent at every point, not only on the path.
pub fn sensitivity_via_jacobian(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    s: &[f64],
    r: f64,
    rho: f64,
) -> Result<Sensitivity> {
    let e = smoothing_eval(prob, x, y, s, r, rho)?;
    solve_sensitivity(&e.jac_ys, &e.jac_x, prob.dims().l)
}

/// The matrices `𝒜(x, W)` and `a(x, W)` built from a KKT pair `(y, u)` and a
/// diagonal selection `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitJacobians {
    pub a_mat: DenseMatrix,
    pub a_vec: DenseMatrix,
    pub w_choice: Vec<f64>,
}

impl LimitJacobians {
    /// `−𝒜⁻¹ a`, the element of the bound set this selection induces.
    pub fn induced_derivative(&self, l: usize) -> Result<Sensitivity> {
        solve_sensitivity(&self.a_mat, &self.a_vec, l)
    }
}

pub fn limit_jacobians(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    w_choice: &[f64],
) -> Result<LimitJacobians> {
    let m = prob.dims().m;
    check_len("u", u, m)?;
    check_len("W", w_choice, m)?;
    if let Some(w) = w_choice.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::InvalidParameter(format!("W entries must lie in [0,1], got {w}")));
    }
    let low = prob.eval_lower_derivs(x, y)?;
    let (a_mat, a_vec) = assemble_b(&low, u, w_choice);
    Ok(LimitJacobians {
        a_mat,
        a_vec,
        w_choice: w_choice.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{central_diff_jacobian_scaled, inf_norm};
    use crate::problem::{corpus_get, corpus_names, relative_error, sample_points};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zk_examples() {
        let zk = eval_zk(&[0.0], &[0.0], 1.0, 1.0).unwrap();
        assert_eq!((zk.z[0], zk.kappa[0]), (1.0, 1.0));
        let zk = eval_zk(&[-2.0], &[0.0], 0.0, 1.0).unwrap();
        assert_eq!((zk.z[0], zk.kappa[0]), (2.0, 0.0));
        let zk = eval_zk(&[0.3], &[0.7], 0.5, 2.0).unwrap();
        assert!((zk.z[0] * zk.kappa[0] - 1.0).abs() < 1e-12);
        assert!(((zk.z[0] + 0.3) - (zk.kappa[0] - 2.0 * 0.7)).abs() < 1e-12);
    }

    #[test]
    fn zk_rejects_bad_parameters() {
        assert!(matches!(eval_zk(&[0.0], &[0.0], 1.0, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(eval_zk(&[0.0], &[0.0], -1.0, 1.0), Err(Error::InvalidParameter(_))));
        assert!(eval_zk(&[0.0], &[0.0], 0.0, 1.0).is_ok());
    }

    #[test]
    fn zk_stays_accurate_far_from_the_origin() {
        // The naive difference would return z = 0 here.
        let zk = eval_zk(&[1e3], &[0.0], 1e-8, 1.0).unwrap();
        assert!(zk.z[0] > 0.0);
        assert!((zk.z[0] * zk.kappa[0] / 1e-8 - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn zk_identities(g in -1e3f64..1e3, s in -1e3f64..1e3, r in 0.0f64..1e3, rho in 1e-7f64..10.0) {
            let zk = eval_zk(&[g], &[s], r, rho).unwrap();
            let (z, k) = (zk.z[0], zk.kappa[0]);
            prop_assert!(z >= 0.0 && k >= 0.0);
            prop_assert!((z * k - r * rho).abs() <= 1e-9 * (r * rho).max(1.0));
            prop_assert!(((z + g) - (k - rho * s)).abs() <= 1e-9 * (k + rho * s.abs()).max(1.0));
        }

        #[test]
        fn zero_barrier_is_complementarity(g in -1e3f64..1e3, s in -1e3f64..1e3, rho in 1e-7f64..10.0) {
            let zk = eval_zk(&[g], &[s], 0.0, rho).unwrap();
            let t = rho * s + g;
            prop_assert_eq!(zk.z[0], (-t).max(0.0));
            prop_assert_eq!(zk.kappa[0], t.max(0.0));
        }

        #[test]
        fn w_in_unit_interval(g in -1e3f64..1e3, s in -1e3f64..1e3, r in 0.0f64..1e3, rho in 1e-7f64..10.0) {
            let zk = eval_zk(&[g], &[s], r, rho).unwrap();
            let w = w_diag(&zk, rho)[0];
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }

    /// Random smooth-regime points `(x, y, s, r, ρ)` for a problem.
    fn smooth_points(name: &str, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
        let p = corpus_get(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_points(&p, count, seed)
            .into_iter()
            .map(|(x, y)| {
                let s = (0..p.dims().m).map(|_| rng.random_range(0.0..2.0)).collect();
                let r = [1e-1, 1e-3][rng.random_range(0..2)];
                let rho = rng.random_range(0.5..4.0);
                (x, y, s, r, rho)
            })
            .collect()
    }

    #[test]
    fn zk_grads_match_differences() {
        let p = corpus_get("two_lower_cons").unwrap();
        for (x, y, s, r, rho) in smooth_points("two_lower_cons", 100, 3) {
            let gr = eval_zk_grads(&p, &x, &y, &s, r, rho).unwrap();
            let zk_at = |x: &[f64], y: &[f64], s: &[f64]| {
                let (_, g) = p.eval_lower_value(x, y).unwrap();
                eval_zk(&g, s, r, rho).unwrap()
            };
            let fd_zx = central_diff_jacobian_scaled(|v| zk_at(v, &y, &s).z, &x).unwrap();
            let fd_ky = central_diff_jacobian_scaled(|v| zk_at(&x, v, &s).kappa, &y).unwrap();
            let fd_zy = central_diff_jacobian_scaled(|v| zk_at(&x, v, &s).z, &y).unwrap();
            let fd_kx = central_diff_jacobian_scaled(|v| zk_at(v, &y, &s).kappa, &x).unwrap();
            let fd_s = central_diff_jacobian_scaled(
                |v| {
                    let zk = zk_at(&x, &y, v);
                    zk.z.iter().chain(&zk.kappa).copied().collect()
                },
                &s,
            )
            .unwrap();
            assert!(relative_error(&gr.z_x, &fd_zx) < 1e-6);
            assert!(relative_error(&gr.z_y, &fd_zy) < 1e-6);
            assert!(relative_error(&gr.kappa_x, &fd_kx) < 1e-6);
            assert!(relative_error(&gr.kappa_y, &fd_ky) < 1e-6);
            let m = s.len();
            let mut ds = DenseMatrix::zeros(2 * m, m);
            for i in 0..m {
                ds[(i, i)] = gr.z_s[i];
                ds[(m + i, i)] = gr.kappa_s[i];
            }
            assert!(relative_error(&ds, &fd_s) < 1e-6);
        }
    }

    #[test]
    fn symmetric_point_halves_the_gradient() {
        // qp_kink: g = −y. With ρs + g = 0 the pair is symmetric.
        let p = corpus_get("qp_kink").unwrap();
        let gr = eval_zk_grads(&p, &[0.3], &[0.5], &[0.25], 0.1, 2.0).unwrap();
        assert!((gr.z_y[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((gr.kappa_y[(0, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn grads_need_positive_barrier() {
        let p = corpus_get("qp_kink").unwrap();
        assert!(matches!(
            eval_zk_grads(&p, &[0.0], &[0.0], &[0.0], 0.0, 1.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(eval_sbal(&p, &[0.0], &[0.0], &[0.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn sbal_gradients_match_differences() {
        for name in corpus_names() {
            let p = corpus_get(name).unwrap();
            for (x, y, s, r, rho) in smooth_points(name, 20, 11) {
                let e = eval_sbal(&p, &x, &y, &s, r, rho).unwrap();
                let fy = central_diff_jacobian_scaled(
                    |v| vec![eval_sbal(&p, &x, v, &s, r, rho).unwrap().value],
                    &y,
                )
                .unwrap();
                let gy = DenseMatrix::from_row_major(1, y.len(), e.grad_y.clone());
                assert!(relative_error(&gy, &fy) < 1e-5, "{name}");
                if !s.is_empty() {
                    let fs = central_diff_jacobian_scaled(
                        |v| vec![eval_sbal(&p, &x, &y, v, r, rho).unwrap().value],
                        &s,
                    )
                    .unwrap();
                    let gs = DenseMatrix::from_row_major(1, s.len(), e.grad_s.clone());
                    assert!(relative_error(&gs, &fs) < 1e-5, "{name}");
                }
            }
        }
    }

    #[test]
    fn sbal_psi_zero_when_slack_matches() {
        // g = −y = −0.5 and s chosen so z = 0.5: t = ρs − 0.5, need zκ = rρ with κ = z + t.
        let p = corpus_get("qp_kink").unwrap();
        let (r, rho): (f64, f64) = (0.1, 2.0);
        // z = 0.5 ⇒ κ = rρ/0.5 = 0.4 ⇒ t = −0.1 ⇒ s = 0.2.
        let e = eval_sbal(&p, &[1.0], &[0.5], &[0.2], r, rho).unwrap();
        assert!(e.grad_s[0].abs() < 1e-15);
    }

    #[test]
    fn sbal_small_at_lower_kkt_point() {
        let p = corpus_get("qp_kink").unwrap();
        let e = eval_sbal(&p, &[1.0], &[1.0], &[0.0], 1e-8, 2.0).unwrap();
        assert!(inf_norm(&e.grad_y) <= 1e-3);
    }

    #[test]
    fn residual_vanishes_at_kkt_pair() {
        let p = corpus_get("qp_kink").unwrap();
        let c = eval_c(&p, &[2.0], &[2.0], &[0.0], 0.0, 2.0).unwrap();
        assert_eq!(inf_norm(&c), 0.0);
        let c = eval_c(&p, &[2.0], &[2.0], &[0.0], 1e-12, 2.0).unwrap();
        assert!(inf_norm(&c) < 1e-10);
    }

    /// KKT pairs with known multipliers: qp_kink at several x.
    #[test]
    fn residual_bound_along_exact_kkt_pairs() {
        let p = corpus_get("qp_kink").unwrap();
        let rho: f64 = 2.0;
        // |g| and |u| bounded by C = 2 on the probe set, m = 1.
        let bound = |r: f64| (1.0 + 2.0 / rho) * (r * rho).sqrt();
        for &x in &[-1.5, -0.5, 0.5, 1.5] {
            let (y, u) = (f64::max(x, 0.0), f64::max(-x, 0.0));
            for &r in &[1e-2, 1e-4, 1e-6] {
                let c = eval_c(&p, &[x], &[y], &[u], r, rho).unwrap();
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= bound(r), "x={x} r={r}: {norm} > {}", bound(r));
            }
        }
        assert!((bound(1e-4) / bound(5e-5) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn jacobians_match_differences() {
        for name in corpus_names() {
            let p = corpus_get(name).unwrap();
            for (x, y, s, r, rho) in smooth_points(name, 20, 5) {
                let (jys, jx) = jac_c(&p, &x, &y, &s, r, rho).unwrap();
                let ys: Vec<f64> = y.iter().chain(&s).copied().collect();
                let l = y.len();
                let fd = central_diff_jacobian_scaled(
                    |v| eval_c(&p, &x, &v[..l], &v[l..], r, rho).unwrap(),
                    &ys,
                )
                .unwrap();
                assert!(relative_error(&jys, &fd) < 1e-5, "{name}: jac_ys");
                let fd = central_diff_jacobian_scaled(|v| eval_c(&p, v, &y, &s, r, rho).unwrap(), &x).unwrap();
                assert!(relative_error(&jx, &fd) < 1e-5, "{name}: jac_x");
            }
        }
    }

    #[test]
    fn y_independent_constraint_has_zero_psi_y_block() {
        // kink_min-like problem with g depending on x only.
        let text = "name = gx\ndims = 1 1\nx0 = 0\ny0 = 0\nF = x1^2\nf = y1^2\ng1 = x1 - 3\n";
        let p = crate::problem::parse_problem_file(text).unwrap();
        let (jys, _) = jac_c(&p, &[0.5], &[0.2], &[0.1], 0.1, 1.0).unwrap();
        assert_eq!(jys[(1, 0)], 0.0);
    }

    #[test]
    fn btilde_invariants() {
        for name in corpus_names() {
            let p = corpus_get(name).unwrap();
            let l = p.dims().l;
            for (x, y, s, r, rho) in smooth_points(name, 10, 9) {
                let e = smoothing_eval(&p, &x, &y, &s, r, rho).unwrap();
                let ul = e.btilde_mat.block(0, 0, l, l);
                assert!(ul.sub(&ul.transpose()).max_abs() <= 1e-10);
                assert!(e.w.iter().all(|w| (0.0..=1.0).contains(w)));
            }
        }
    }

    #[test]
    fn both_sensitivity_routes_agree() {
        for name in corpus_names() {
            let p = corpus_get(name).unwrap();
            for (x, y, s, r, rho) in smooth_points(name, 10, 21) {
                let (Ok(a), Ok(b)) = (
                    sensitivity(&p, &x, &y, &s, r, rho),
                    sensitivity_via_jacobian(&p, &x, &y, &s, r, rho),
                ) else {
                    continue;
                };
                let scale = a.vtilde.max_abs().max(1.0);
                assert!(a.vtilde.sub(&b.vtilde).max_abs() <= 1e-8 * scale, "{name}");
                // Residual invariant.
                let e = smoothing_eval(&p, &x, &y, &s, r, rho).unwrap();
                let res = e.btilde_vec.add(&e.btilde_mat.matmul(&a.vtilde));
                assert!(res.max_abs() <= 1e-8 * (1.0 + e.btilde_vec.max_abs()));
            }
        }
    }

    /// Point on the smoothed path of qp_kink: `y² − xy − r = 0`, `s = r/y`.
    fn kink_path(x: f64, r: f64) -> (f64, f64) {
        let y = 0.5 * (x + (x * x + 4.0 * r).sqrt());
        (y, r / y)
    }

    #[test]
    fn sensitivity_on_both_branches() {
        let p = corpus_get("qp_kink").unwrap();
        let r = 1e-8;
        let (y, s) = kink_path(0.5, r);
        let v = sensitivity(&p, &[0.5], &[y], &[s], r, 2.0).unwrap().v[(0, 0)];
        assert!((v - 1.0).abs() < 1e-3);
        let (y, s) = kink_path(-0.5, r);
        let v = sensitivity(&p, &[-0.5], &[y], &[s], r, 2.0).unwrap().v[(0, 0)];
        assert!(v.abs() < 1e-3);
    }

    #[test]
    fn sensitivity_matches_path_derivative() {
        let p = corpus_get("qp_kink").unwrap();
        let r = 1e-4;
        for &x in &[-1.0, -0.5, 0.5, 1.0, 2.0] {
            let (y, s) = kink_path(x, r);
            let v = sensitivity(&p, &[x], &[y], &[s], r, 2.0).unwrap().v[(0, 0)];
            let exact = 0.5 * (1.0 + x / (x * x + 4.0 * r).sqrt());
            assert!((v - exact).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn limit_of_btilde_along_the_path() {
        let p = corpus_get("qp_kink").unwrap();
        let (x, r, rho) = (0.5, 1e-10, 2.0);
        let (y, s) = kink_path(x, r);
        let e = smoothing_eval(&p, &[x], &[y], &[s], r, rho).unwrap();
        // At x = 0.5 the constraint is inactive: u = 0, w̄ = 1.
        let lim = limit_jacobians(&p, &[x], &[0.5], &[0.0], &[1.0]).unwrap();
        assert!(e.btilde_mat.sub(&lim.a_mat).max_abs() < 1e-4);
        assert!(e.btilde_vec.sub(&lim.a_vec).max_abs() < 1e-4);
    }

    #[test]
    fn identity_selection_zeroes_lower_left() {
        let p = corpus_get("two_lower_cons").unwrap();
        let lim = limit_jacobians(&p, &[0.5], &[0.5], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let l = 1;
        assert_eq!(lim.a_mat.block(l, 0, 2, l).max_abs(), 0.0);
        assert_eq!(lim.a_mat.block(l, l, 2, 2), DenseMatrix::identity(2));
    }

    #[test]
    fn selections_induce_branch_derivatives() {
        let p = corpus_get("qp_kink").unwrap();
        // Inactive selection (W = 1) at x = 0.5 reproduces dy/dx = 1.
        let lim = limit_jacobians(&p, &[0.5], &[0.5], &[0.0], &[1.0]).unwrap();
        assert!((lim.induced_derivative(1).unwrap().v[(0, 0)] - 1.0).abs() < 1e-14);
        // Active selection (W = 0) pins y: derivative 0.
        let lim = limit_jacobians(&p, &[0.5], &[0.5], &[0.0], &[0.0]).unwrap();
        assert!(lim.induced_derivative(1).unwrap().v[(0, 0)].abs() < 1e-14);
        assert!(limit_jacobians(&p, &[0.5], &[0.5], &[0.0], &[1.5]).is_err());
    }

    #[test]
    fn kink_sensitivity_approaches_bouligand_elements() {
        let p = corpus_get("qp_kink").unwrap();
        for &sign in &[1.0, -1.0] {
            let mut last = f64::NAN;
            for k in 2..7 {
                let x: f64 = sign * 10f64.powi(-k) * 3.0;
                let r = x.powi(4);
                let (y, s) = kink_path(x, r);
                last = sensitivity(&p, &[x], &[y], &[s], r, 2.0).unwrap().v[(0, 0)];
            }
            let target = if sign > 0.0 { 1.0 } else { 0.0 };
            assert!((last - target).abs() < 1e-3, "sign {sign}: {last}");
        }
    }
}

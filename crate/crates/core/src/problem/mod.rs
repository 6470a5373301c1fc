//! Bilevel problem model.
//!
//! A problem is
//!
//! ```text
//!   min_x  F(x, y)   s.t.  G(x, y) <= 0,  H(x, y) = 0,  y solves P_x
//!   P_x:   min_y  f(x, y)   s.t.  g(x, y) <= 0
//! ```
//!
//! with `x ∈ R^d`, `y ∈ R^l`, `g ∈ R^m`, `G ∈ R^p`, `H ∈ R^q`. Models supply
//! analytic first derivatives of the upper functions and first and second
//! derivatives of the lower functions through [`BilevelModel`].
//!
//! Matrix conventions: Jacobians are `outputs x inputs`, so `∇_y g` is
//! `m x l`. Mixed second derivatives `∇²_{xy}` are `l x d` with entry
//! `(i, j) = ∂²/∂y_i∂x_j`, i.e. the x-Jacobian of the y-gradient.

pub mod corpus;
mod fd;
pub mod poly;

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::numkit::{central_diff_jacobian_scaled, dot, DenseMatrix};

pub use corpus::{corpus_get, corpus_names};
pub use fd::{FiniteDifferenceModel, ValueOnlyModel};
pub use poly::{parse_problem_file, Polynomial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    /// upper-level variables
    pub d: usize,
    /// lower-level variables
    pub l: usize,
    /// lower-level inequalities
    pub m: usize,
    /// upper-level inequalities
    pub p: usize,
    /// upper-level equalities
    pub q: usize,
}

/// Function values and derivatives of one bilevel program.
///
/// The upper-level constraint methods default to empty blocks so that
/// problems without `G` or `H` only implement what they use.
pub trait BilevelModel: Send + Sync {
    fn dims(&self) -> Dims;

    fn upper_obj(&self, x: &[f64], y: &[f64]) -> f64;
    /// `(∇_x F, ∇_y F)`
    fn upper_obj_grad(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>);

    fn upper_ineq(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    /// `(∇_x G, ∇_y G)`, `p x d` and `p x l`.
    fn upper_ineq_jac(&self, _x: &[f64], _y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let dims = self.dims();
        (DenseMatrix::zeros(0, dims.d), DenseMatrix::zeros(0, dims.l))
    }
    fn upper_eq(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    /// `(∇_x H, ∇_y H)`, `q x d` and `q x l`.
    fn upper_eq_jac(&self, _x: &[f64], _y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let dims = self.dims();
        (DenseMatrix::zeros(0, dims.d), DenseMatrix::zeros(0, dims.l))
    }

    fn lower_obj(&self, x: &[f64], y: &[f64]) -> f64;
    fn lower_obj_grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn lower_obj_hess_yy(&self, x: &[f64], y: &[f64]) -> DenseMatrix;
    fn lower_obj_hess_xy(&self, x: &[f64], y: &[f64]) -> DenseMatrix;

    fn lower_cons(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    /// `(∇_x g, ∇_y g)`, `m x d` and `m x l`.
    fn lower_cons_jac(&self, x: &[f64], y: &[f64]) -> (DenseMatrix, DenseMatrix);
    fn lower_cons_hess_yy(&self, i: usize, x: &[f64], y: &[f64]) -> DenseMatrix;
    fn lower_cons_hess_xy(&self, i: usize, x: &[f64], y: &[f64]) -> DenseMatrix;
}

/// Coordinate-wise search box, used by the grid oracle and for sampling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchBox {
    pub x: Vec<(f64, f64)>,
    pub y: Vec<(f64, f64)>,
}

impl SearchBox {
    pub fn contains(&self, x: &[f64], y: &[f64]) -> bool {
        let inside = |v: &[f64], b: &[(f64, f64)]| v.iter().zip(b).all(|(v, (lo, hi))| lo <= v && v <= hi);
        inside(x, &self.x) && inside(y, &self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Closed-form reduction of the bilevel program.
    Analytic,
    /// Brute-force grid search or a one-dimensional root oracle.
    Oracle,
}

/// Known solution of a corpus problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub upper_obj: f64,
    pub lower_obj: f64,
    pub source: ReferenceSource,
}

/// A named bilevel program together with its start point, box and
/// (optionally) a reference solution.
#[derive(Clone)]
pub struct BilevelProblem {
    name: String,
    description: String,
    dims: Dims,
    model: Arc<dyn BilevelModel>,
    default_start: (Vec<f64>, Vec<f64>),
    search_box: Option<SearchBox>,
    reference: Option<Reference>,
}

impl fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("default_start", &self.default_start)
            .field("search_box", &self.search_box)
            .field("reference", &self.reference)
            .finish()
    }
}

/// Upper-level values at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperEval {
    pub obj: f64,
    pub ineq: Vec<f64>,
    pub eq: Vec<f64>,
}

/// Upper-level derivatives at a point.
#[derive(Debug, Clone)]
pub struct UpperDerivs {
    pub obj_x: Vec<f64>,
    pub obj_y: Vec<f64>,
    pub ineq_x: DenseMatrix,
    pub ineq_y: DenseMatrix,
    pub eq_x: DenseMatrix,
    pub eq_y: DenseMatrix,
}

/// Lower-level values and first derivatives.
#[derive(Debug, Clone)]
pub struct LowerFirstOrder {
    pub f: f64,
    pub grad_y_f: Vec<f64>,
    pub g: Vec<f64>,
    pub jac_x_g: DenseMatrix,
    pub jac_y_g: DenseMatrix,
}

/// Everything the smoothing calculus needs from the lower level.
#[derive(Debug, Clone)]
pub struct LowerDerivs {
    pub first: LowerFirstOrder,
    pub hess_yy_f: DenseMatrix,
    pub hess_xy_f: DenseMatrix,
    pub hess_yy_g: Vec<DenseMatrix>,
    pub hess_xy_g: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianEval {
    pub value: f64,
    pub grad_y: Vec<f64>,
}

fn finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteEvaluation(what.to_string()))
    }
}

fn check_shape(what: &'static str, m: &DenseMatrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::ShapeMismatch {
            what,
            expected: rows,
            got: m.rows(),
        });
    }
    if m.cols() != cols {
        return Err(Error::ShapeMismatch {
            what,
            expected: cols,
            got: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFiniteEvaluation(what.to_string()));
    }
    Ok(())
}

impl BilevelProblem {
    pub fn new(
        name: impl Into<String>,
        model: Arc<dyn BilevelModel>,
        default_start: (Vec<f64>, Vec<f64>),
    ) -> Result<Self> {
        let dims = model.dims();
        check_len("default start x", &default_start.0, dims.d)?;
        check_len("default start y", &default_start.1, dims.l)?;
        Ok(Self {
            name: name.into(),
            description: String::new(),
            dims,
            model,
            default_start,
            search_box: None,
            reference: None,
        })
    }

    pub fn with_box(mut self, search_box: SearchBox) -> Result<Self> {
        if search_box.x.len() != self.dims.d {
            return Err(Error::ShapeMismatch {
                what: "box x",
                expected: self.dims.d,
                got: search_box.x.len(),
            });
        }
        if search_box.y.len() != self.dims.l {
            return Err(Error::ShapeMismatch {
                what: "box y",
                expected: self.dims.l,
                got: search_box.y.len(),
            });
        }
        if search_box.x.iter().chain(&search_box.y).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidParameter("box bounds must satisfy lo < hi".into()));
        }
        self.search_box = Some(search_box);
        Ok(self)
    }

    pub fn with_reference(mut self, reference: Reference) -> Result<Self> {
        check_len("reference x", &reference.x, self.dims.d)?;
        check_len("reference y", &reference.y, self.dims.l)?;
        self.reference = Some(reference);
        Ok(self)
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn model(&self) -> &dyn BilevelModel {
        self.model.as_ref()
    }

    pub fn default_start(&self) -> (&[f64], &[f64]) {
        (&self.default_start.0, &self.default_start.1)
    }

    pub fn search_box(&self) -> Option<&SearchBox> {
        self.search_box.as_ref()
    }

    pub fn reference(&self) -> Option<&Reference> {
        self.reference.as_ref()
    }

    fn check_point(&self, x: &[f64], y: &[f64]) -> Result<()> {
        check_len("x", x, self.dims.d)?;
        check_len("y", y, self.dims.l)
    }

    /// Raw `(F, G, H)` at `(x, y)`.
    pub fn eval_upper(&self, x: &[f64], y: &[f64]) -> Result<UpperEval> {
        self.check_point(x, y)?;
        let obj = self.model.upper_obj(x, y);
        let ineq = self.model.upper_ineq(x, y);
        let eq = self.model.upper_eq(x, y);
        check_len("G", &ineq, self.dims.p)?;
        check_len("H", &eq, self.dims.q)?;
        finite("F", &[obj])?;
        finite("G", &ineq)?;
        finite("H", &eq)?;
        Ok(UpperEval { obj, ineq, eq })
    }

    pub fn eval_upper_derivs(&self, x: &[f64], y: &[f64]) -> Result<UpperDerivs> {
        self.check_point(x, y)?;
        let Dims { d, l, p, q, .. } = self.dims;
        let (obj_x, obj_y) = self.model.upper_obj_grad(x, y);
        check_len("∇_x F", &obj_x, d)?;
        check_len("∇_y F", &obj_y, l)?;
        finite("∇F", &obj_x)?;
        finite("∇F", &obj_y)?;
        let (ineq_x, ineq_y) = self.model.upper_ineq_jac(x, y);
        check_shape("∇_x G", &ineq_x, p, d)?;
        check_shape("∇_y G", &ineq_y, p, l)?;
        let (eq_x, eq_y) = self.model.upper_eq_jac(x, y);
        check_shape("∇_x H", &eq_x, q, d)?;
        check_shape("∇_y H", &eq_y, q, l)?;
        Ok(UpperDerivs {
            obj_x,
            obj_y,
            ineq_x,
            ineq_y,
            eq_x,
            eq_y,
        })
    }

    pub fn eval_lower_value(&self, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_point(x, y)?;
        let f = self.model.lower_obj(x, y);
        let g = self.model.lower_cons(x, y);
        check_len("g", &g, self.dims.m)?;
        finite("f", &[f])?;
        finite("g", &g)?;
        Ok((f, g))
    }

    pub fn eval_lower_first(&self, x: &[f64], y: &[f64]) -> Result<LowerFirstOrder> {
        let (f, g) = self.eval_lower_value(x, y)?;
        let Dims { d, l, m, .. } = self.dims;
        let grad_y_f = self.model.lower_obj_grad_y(x, y);
        check_len("∇_y f", &grad_y_f, l)?;
        finite("∇_y f", &grad_y_f)?;
        let (jac_x_g, jac_y_g) = self.model.lower_cons_jac(x, y);
        check_shape("∇_x g", &jac_x_g, m, d)?;
        check_shape("∇_y g", &jac_y_g, m, l)?;
        Ok(LowerFirstOrder {
            f,
            grad_y_f,
            g,
            jac_x_g,
            jac_y_g,
        })
    }

    /// The full lower-level derivative bundle at `(x, y)`.
    pub fn eval_lower_derivs(&self, x: &[f64], y: &[f64]) -> Result<LowerDerivs> {
        let first = self.eval_lower_first(x, y)?;
        let Dims { d, l, m, .. } = self.dims;
        let hess_yy_f = self.model.lower_obj_hess_yy(x, y);
        check_shape("∇²_yy f", &hess_yy_f, l, l)?;
        let hess_xy_f = self.model.lower_obj_hess_xy(x, y);
        check_shape("∇²_xy f", &hess_xy_f, l, d)?;
        let mut hess_yy_g = Vec::with_capacity(m);
        let mut hess_xy_g = Vec::with_capacity(m);
        for i in 0..m {
            let hyy = self.model.lower_cons_hess_yy(i, x, y);
            check_shape("∇²_yy g_i", &hyy, l, l)?;
            let hxy = self.model.lower_cons_hess_xy(i, x, y);
            check_shape("∇²_xy g_i", &hxy, l, d)?;
            hess_yy_g.push(hyy);
            hess_xy_g.push(hxy);
        }
        Ok(LowerDerivs {
            first,
            hess_yy_f,
            hess_xy_f,
            hess_yy_g,
            hess_xy_g,
        })
    }

    /// `ℒ(x, y, u) = f + Σ u_i g_i` and its y-gradient.
    pub fn lagrangian(&self, x: &[f64], y: &[f64], u: &[f64]) -> Result<LagrangianEval> {
        check_len("u", u, self.dims.m)?;
        let low = self.eval_lower_first(x, y)?;
        let value = low.f + dot(u, &low.g);
        let mut grad_y = low.grad_y_f;
        for (o, v) in grad_y.iter_mut().zip(low.jac_y_g.tr_mul_vec(u)) {
            *o += v;
        }
        Ok(LagrangianEval { value, grad_y })
    }
}

/// Result of comparing one supplied derivative against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub name: String,
    /// `max over points of ‖analytic − fd‖_max / max(1, ‖fd‖_max)`
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub problem: String,
    pub tol: f64,
    pub checks: Vec<DerivativeCheck>,
    pub points: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DerivativeReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &DerivativeCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// `‖a − b‖_max / max(1, ‖b‖_max)`, the error measure used by every
/// derivative check in the crate.
pub fn relative_error(analytic: &DenseMatrix, reference: &DenseMatrix) -> f64 {
    assert_eq!((analytic.rows(), analytic.cols()), (reference.rows(), reference.cols()));
    analytic.sub(reference).max_abs() / reference.max_abs().max(1.0)
}

fn concat(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().chain(y).copied().collect()
}

/// Checks every derivative a problem supplies against central differences
/// at each point, plus symmetry of the yy-Hessians. Failures are reported,
/// never returned as errors; a point where evaluation fails marks every
/// check as failed with infinite error.
pub fn validate_derivatives(
    prob: &BilevelProblem,
    points: &[(Vec<f64>, Vec<f64>)],
    tol: f64,
) -> DerivativeReport {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: String, err: f64| {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => *e = e.max(err),
            None => worst.push((name, err)),
        }
    };

    for (x, y) in points {
        if let Err(e) = check_point_derivs(prob, x, y, &mut record) {
            record(format!("evaluation ({e})"), f64::INFINITY);
        }
    }

    let checks = worst
        .into_iter()
        .map(|(name, max_rel_error)| DerivativeCheck {
            passed: max_rel_error <= tol,
            name,
            max_rel_error,
        })
        .collect();
    DerivativeReport {
        problem: prob.name().to_string(),
        tol,
        checks,
        points: points.to_vec(),
    }
}

fn check_point_derivs(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    record: &mut impl FnMut(String, f64),
) -> Result<()> {
    let Dims { d, l, m, .. } = prob.dims();
    let model = prob.model();
    let xy = concat(x, y);
    let split = |v: &[f64]| (v[..d].to_vec(), v[d..].to_vec());

    let upper = prob.eval_upper_derivs(x, y)?;
    let lower = prob.eval_lower_derivs(x, y)?;

    // Upper objective.
    let fd = central_diff_jacobian_scaled(
        |v| {
            let (a, b) = split(v);
            vec![model.upper_obj(&a, &b)]
        },
        &xy,
    )?;
    let analytic = DenseMatrix::from_row_major(1, d + l, concat(&upper.obj_x, &upper.obj_y));
    record("grad F".into(), relative_error(&analytic, &fd));

    let hstack = |a: &DenseMatrix, b: &DenseMatrix| {
        let mut out = DenseMatrix::zeros(a.rows(), a.cols() + b.cols());
        out.set_block(0, 0, a);
        out.set_block(0, a.cols(), b);
        out
    };

    if prob.dims().p > 0 {
        let fd = central_diff_jacobian_scaled(
            |v| {
                let (a, b) = split(v);
                model.upper_ineq(&a, &b)
            },
            &xy,
        )?;
        record("jac G".into(), relative_error(&hstack(&upper.ineq_x, &upper.ineq_y), &fd));
    }
    if prob.dims().q > 0 {
        let fd = central_diff_jacobian_scaled(
            |v| {
                let (a, b) = split(v);
                model.upper_eq(&a, &b)
            },
            &xy,
        )?;
        record("jac H".into(), relative_error(&hstack(&upper.eq_x, &upper.eq_y), &fd));
    }

    // Lower objective: gradient in y, then both Hessian blocks via the gradient.
    let fd = central_diff_jacobian_scaled(|v| vec![model.lower_obj(x, v)], y)?;
    let analytic = DenseMatrix::from_row_major(1, l, lower.first.grad_y_f.clone());
    record("grad_y f".into(), relative_error(&analytic, &fd));

    let fd = central_diff_jacobian_scaled(|v| model.lower_obj_grad_y(x, v), y)?;
    record("hess_yy f".into(), relative_error(&lower.hess_yy_f, &fd));
    let fd = central_diff_jacobian_scaled(|v| model.lower_obj_grad_y(v, y), x)?;
    record("hess_xy f".into(), relative_error(&lower.hess_xy_f, &fd));
    record(
        "hess_yy f symmetry".into(),
        lower.hess_yy_f.sub(&lower.hess_yy_f.transpose()).max_abs(),
    );

    if m > 0 {
        let fd = central_diff_jacobian_scaled(|v| model.lower_cons(v, y), x)?;
        record("jac_x g".into(), relative_error(&lower.first.jac_x_g, &fd));
        let fd = central_diff_jacobian_scaled(|v| model.lower_cons(x, v), y)?;
        record("jac_y g".into(), relative_error(&lower.first.jac_y_g, &fd));
        for i in 0..m {
            let fd = central_diff_jacobian_scaled(|v| model.lower_cons_jac(x, v).1.row(i).to_vec(), y)?;
            record(format!("hess_yy g{}", i + 1), relative_error(&lower.hess_yy_g[i], &fd));
            let fd = central_diff_jacobian_scaled(|v| model.lower_cons_jac(v, y).1.row(i).to_vec(), x)?;
            record(format!("hess_xy g{}", i + 1), relative_error(&lower.hess_xy_g[i], &fd));
            let h = &lower.hess_yy_g[i];
            record(format!("hess_yy g{} symmetry", i + 1), h.sub(&h.transpose()).max_abs());
        }
    }
    Ok(())
}

/// Uniform random points inside a problem's box (or a unit box around the
/// default start when the problem has none).
pub fn sample_points(prob: &BilevelProblem, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0) = prob.default_start();
    let around = |v: &[f64]| v.iter().map(|c| (c - 1.0, c + 1.0)).collect::<Vec<_>>();
    let (bx, by) = match prob.search_box() {
        Some(b) => (b.x.clone(), b.y.clone()),
        None => (around(x0), around(y0)),
    };
    (0..count)
        .map(|_| {
            let x = bx.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
            let y = by.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
            (x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_upper_qp_kink() {
        let p = corpus_get("qp_kink").unwrap();
        let u = p.eval_upper(&[1.0], &[1.0]).unwrap();
        assert_eq!(u.obj, 0.0);
        assert!(u.ineq.is_empty() && u.eq.is_empty());
        assert_eq!(p.eval_upper(&[0.0], &[0.0]).unwrap().obj, 2.0);
    }

    #[test]
    fn eval_upper_equality_zero_on_line() {
        let p = corpus_get("eq_coupled").unwrap();
        let u = p.eval_upper(&[0.7], &[1.3]).unwrap();
        assert!(u.eq[0].abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reported() {
        let p = corpus_get("qp_kink").unwrap();
        assert!(matches!(
            p.eval_upper(&[1.0, 2.0], &[1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            p.lagrangian(&[1.0], &[1.0], &[]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn qp_kink_lower_derivs() {
        let p = corpus_get("qp_kink").unwrap();
        for &(x, y) in &[(0.3, -1.2), (2.0, 5.0), (-1.0, 0.0)] {
            let b = p.eval_lower_derivs(&[x], &[y]).unwrap();
            assert_eq!(b.first.grad_y_f, vec![y - x]);
            assert_eq!(b.hess_yy_f.as_slice(), &[1.0]);
            assert_eq!(b.hess_xy_f.as_slice(), &[-1.0]);
            assert_eq!(b.first.jac_y_g.as_slice(), &[-1.0]);
            assert_eq!(b.first.jac_x_g.as_slice(), &[0.0]);
            assert_eq!(b.hess_yy_g[0].as_slice(), &[0.0]);
            assert_eq!(b.hess_xy_g[0].as_slice(), &[0.0]);
        }
    }

    #[test]
    fn quadratic_hessian_constant() {
        let text = "name = quad\ndims = 1 2\nx0 = 0\ny0 = 0 0\nF = x1^2\n\
                    f = 2*y1^2 + y1*y2 + 3*y2^2 - x1*y1\n";
        let p = parse_problem_file(text).unwrap();
        for (x, y) in sample_points(&p, 5, 1) {
            let b = p.eval_lower_derivs(&x, &y).unwrap();
            assert_eq!(b.hess_yy_f, DenseMatrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 6.0]]));
        }
    }

    #[test]
    fn lagrangian_cases() {
        let p = corpus_get("qp_kink").unwrap();
        let l0 = p.lagrangian(&[0.4], &[1.5], &[0.0]).unwrap();
        assert_eq!(l0.value, 0.5 * 1.5 * 1.5 - 0.4 * 1.5);
        assert_eq!(l0.grad_y, vec![1.5 - 0.4]);
        let l1 = p.lagrangian(&[0.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(l1.grad_y, vec![-1.0]);
        // x = -1: y(x) = 0 with multiplier u = 1.
        let kkt = p.lagrangian(&[-1.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(kkt.grad_y, vec![0.0]);
    }

    #[test]
    fn corpus_derivatives_validate() {
        for name in corpus_names() {
            let p = corpus_get(name).unwrap();
            let pts = sample_points(&p, 25, 42);
            let report = validate_derivatives(&p, &pts, 1e-5);
            assert!(
                report.all_passed(),
                "{name}: {:?}",
                report.failures().collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corpus_hessians_symmetric() {
        for name in corpus_names() {
            let p = corpus_get(name).unwrap();
            for (x, y) in sample_points(&p, 25, 9) {
                let b = p.eval_lower_derivs(&x, &y).unwrap();
                assert!(b.hess_yy_f.sub(&b.hess_yy_f.transpose()).max_abs() <= 1e-12);
                for h in &b.hess_yy_g {
                    assert!(h.sub(&h.transpose()).max_abs() <= 1e-12);
                }
            }
        }
    }

    struct WrongSign;

    impl BilevelModel for WrongSign {
        fn dims(&self) -> Dims {
            Dims { d: 1, l: 1, m: 1, p: 0, q: 0 }
        }
        fn upper_obj(&self, x: &[f64], y: &[f64]) -> f64 {
            (x[0] - 1.0).powi(2) + (y[0] - 1.0).powi(2)
        }
        fn upper_obj_grad(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
            (vec![2.0 * (x[0] - 1.0)], vec![2.0 * (y[0] - 1.0)])
        }
        fn lower_obj(&self, x: &[f64], y: &[f64]) -> f64 {
            0.5 * y[0] * y[0] - x[0] * y[0]
        }
        fn lower_obj_grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
            vec![-(y[0] - x[0])]
        }
        fn lower_obj_hess_yy(&self, _x: &[f64], _y: &[f64]) -> DenseMatrix {
            DenseMatrix::identity(1)
        }
        fn lower_obj_hess_xy(&self, _x: &[f64], _y: &[f64]) -> DenseMatrix {
            DenseMatrix::from_rows(&[vec![-1.0]])
        }
        fn lower_cons(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
            vec![-y[0]]
        }
        fn lower_cons_jac(&self, _x: &[f64], _y: &[f64]) -> (DenseMatrix, DenseMatrix) {
            (DenseMatrix::zeros(1, 1), DenseMatrix::from_rows(&[vec![-1.0]]))
        }
        fn lower_cons_hess_yy(&self, _i: usize, _x: &[f64], _y: &[f64]) -> DenseMatrix {
            DenseMatrix::zeros(1, 1)
        }
        fn lower_cons_hess_xy(&self, _i: usize, _x: &[f64], _y: &[f64]) -> DenseMatrix {
            DenseMatrix::zeros(1, 1)
        }
    }

    #[test]
    fn wrong_gradient_flagged() {
        let p = BilevelProblem::new("wrong", Arc::new(WrongSign), (vec![0.5], vec![0.5])).unwrap();
        let pts = vec![(vec![0.3], vec![1.7]), (vec![-0.4], vec![0.9])];
        let report = validate_derivatives(&p, &pts, 1e-5);
        let failed: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"grad_y f"), "{failed:?}");
        // The Hessians are consistent with the (wrong) gradient only up to sign.
        assert!(failed.contains(&"hess_yy f"));
        assert!(!failed.contains(&"grad F"));
    }

    #[test]
    fn constant_problem_has_zero_errors() {
        let text = "name = flat\ndims = 1 1\nx0 = 0\ny0 = 0\nF = 3\nf = -2\ng1 = 1\n";
        let p = parse_problem_file(text).unwrap();
        let pts = sample_points(&p, 10, 3);
        let report = validate_derivatives(&p, &pts, 1e-5);
        assert!(report.checks.iter().all(|c| c.max_rel_error == 0.0), "{report:?}");
    }

    #[test]
    fn corpus_is_immutable_across_calls() {
        let a = corpus_get("proj_halfplane").unwrap();
        let b = corpus_get("proj_halfplane").unwrap();
        let (x, y) = (vec![0.37], vec![0.2, -0.9]);
        assert_eq!(a.eval_upper(&x, &y).unwrap(), b.eval_upper(&x, &y).unwrap());
        assert_eq!(a.reference(), b.reference());
        assert_eq!(a.default_start(), b.default_start());
    }
}

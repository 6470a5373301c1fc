//! In-repo test corpus.
//!
//! Every entry has a search box and a reference solution. Polynomial entries
//! live in `problems/*.bil`; the two hand-written models below exercise the
//! trait directly (one of them is not polynomial).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

use super::{parse_problem_file, BilevelModel, BilevelProblem, Dims, Reference, ReferenceSource, SearchBox};

const FILES: &[(&str, &str)] = &[
    ("lin_upper_con", include_str!("../../problems/lin_upper_con.bil")),
    ("eq_coupled", include_str!("../../problems/eq_coupled.bil")),
    ("active_lower", include_str!("../../problems/active_lower.bil")),
    ("kink_min", include_str!("../../problems/kink_min.bil")),
    ("kink_degenerate", include_str!("../../problems/kink_degenerate.bil")),
    ("two_lower_cons", include_str!("../../problems/two_lower_cons.bil")),
    ("multi_dim", include_str!("../../problems/multi_dim.bil")),
    ("proj_halfplane", include_str!("../../problems/proj_halfplane.bil")),
    ("upper_sum_cap", include_str!("../../problems/upper_sum_cap.bil")),
    ("inactive_lower", include_str!("../../problems/inactive_lower.bil")),
    ("sqrt_lower", include_str!("../../problems/sqrt_lower.bil")),
];

/// Registered corpus names in a fixed order.
pub fn corpus_names() -> Vec<&'static str> {
    let mut names = vec!["qp_kink", "trig_lower"];
    names.extend(FILES.iter().map(|(n, _)| *n));
    names
}

pub fn corpus_get(name: &str) -> Result<BilevelProblem> {
    match name {
        "qp_kink" => qp_kink(),
        "trig_lower" => trig_lower(),
        _ => {
            let (_, text) = FILES
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::UnknownProblem(name.to_string()))?;
            parse_problem_file(text)
        }
    }
}

/// `F = (x−1)² + (y−1)²`, `f = ½y² − xy`, `g = −y`.
///
/// The lower solution is `y(x) = max(x, 0)` with multiplier `u(x) = max(−x, 0)`;
/// strict complementarity fails at `x = 0`. Bilevel solution `(1, 1)`.
struct QpKink;

impl BilevelModel for QpKink {
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
        vec![y[0] - x[0]]
    }

    fn lower_obj_hess_yy(&self, _x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::identity(1)
    }

    fn lower_obj_hess_xy(&self, _x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::from_row_major(1, 1, vec![-1.0])
    }

    fn lower_cons(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![-y[0]]
    }

    fn lower_cons_jac(&self, _x: &[f64], _y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        (DenseMatrix::zeros(1, 1), DenseMatrix::from_row_major(1, 1, vec![-1.0]))
    }

    fn lower_cons_hess_yy(&self, _i: usize, _x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(1, 1)
    }

    fn lower_cons_hess_xy(&self, _i: usize, _x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(1, 1)
    }
}

fn qp_kink() -> Result<BilevelProblem> {
    BilevelProblem::new("qp_kink", Arc::new(QpKink), (vec![0.5], vec![0.5]))?
        .with_description("kink in the lower solution map, inactive at the solution")
        .with_box(SearchBox {
            x: vec![(-2.0, 2.0)],
            y: vec![(-2.0, 2.0)],
        })?
        .with_reference(Reference {
            x: vec![1.0],
            y: vec![1.0],
            upper_obj: 0.0,
            lower_obj: -0.5,
            source: ReferenceSource::Analytic,
        })
}

/// `F = (x−1)² + (y−1)²`, `f = ½y² − sin(x)·y`, `g = −y`, so
/// `y(x) = max(sin x, 0)`. The reference solves
/// `2(x−1) + 2(sin x − 1)cos x = 0` by bracketing root search.
struct TrigLower;

impl BilevelModel for TrigLower {
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
        0.5 * y[0] * y[0] - x[0].sin() * y[0]
    }

    fn lower_obj_grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![y[0] - x[0].sin()]
    }

    fn lower_obj_hess_yy(&self, _x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::identity(1)
    }

    fn lower_obj_hess_xy(&self, x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::from_row_major(1, 1, vec![-x[0].cos()])
    }

    fn lower_cons(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![-y[0]]
    }

    fn lower_cons_jac(&self, _x: &[f64], _y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        (DenseMatrix::zeros(1, 1), DenseMatrix::from_row_major(1, 1, vec![-1.0]))
    }

    fn lower_cons_hess_yy(&self, _i: usize, _x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(1, 1)
    }

    fn lower_cons_hess_xy(&self, _i: usize, _x: &[f64], _y: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(1, 1)
    }
}

const TRIG_X: f64 = 1.0617801110512721;

fn trig_lower() -> Result<BilevelProblem> {
    let y = TRIG_X.sin();
    BilevelProblem::new("trig_lower", Arc::new(TrigLower), (vec![0.5], vec![0.5]))?
        .with_description("non-polynomial lower objective")
        .with_box(SearchBox {
            x: vec![(-2.0, 3.0)],
            y: vec![(-2.0, 2.0)],
        })?
        .with_reference(Reference {
            x: vec![TRIG_X],
            y: vec![y],
            upper_obj: (TRIG_X - 1.0).powi(2) + (y - 1.0).powi(2),
            lower_obj: -0.5 * y * y,
            source: ReferenceSource::Oracle,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_resolves_with_box_and_reference() {
        let names = corpus_names();
        assert!(names.len() >= 10);
        for name in names {
            let p = corpus_get(name).unwrap();
            assert_eq!(p.name(), name);
            assert!(p.search_box().is_some(), "{name} has no box");
            let r = p.reference().expect("reference");
            let (x0, y0) = p.default_start();
            assert!(p.search_box().unwrap().contains(x0, y0), "{name} start outside box");
            assert!(p.search_box().unwrap().contains(&r.x, &r.y), "{name} reference outside box");
            // The reference values are consistent with the functions.
            let u = p.eval_upper(&r.x, &r.y).unwrap();
            assert!((u.obj - r.upper_obj).abs() < 1e-12, "{name}: F mismatch");
            let (f, g) = p.eval_lower_value(&r.x, &r.y).unwrap();
            assert!((f - r.lower_obj).abs() < 1e-12, "{name}: f mismatch");
            assert!(g.iter().all(|&v| v <= 1e-12), "{name}: lower infeasible");
            assert!(u.ineq.iter().all(|&v| v <= 1e-12), "{name}: G violated");
            assert!(u.eq.iter().all(|&v| v.abs() <= 1e-12), "{name}: H violated");
        }
    }

    #[test]
    fn unknown_name() {
        assert_eq!(corpus_get("nosuch").unwrap_err(), Error::UnknownProblem("nosuch".into()));
    }

    #[test]
    fn trig_reference_is_stationary() {
        // Bisection on the reduced first-order condition, independent of the constant.
        let h = |x: f64| 2.0 * (x - 1.0) + 2.0 * (x.sin() - 1.0) * x.cos();
        let (mut lo, mut hi) = (0.5, 1.5);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(lo) * h(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((0.5 * (lo + hi) - TRIG_X).abs() < 1e-14);
    }

    #[test]
    fn coverage_of_structural_cases() {
        let dims: Vec<Dims> = corpus_names().iter().map(|n| corpus_get(n).unwrap().dims()).collect();
        assert!(dims.iter().any(|d| d.p > 0));
        assert!(dims.iter().any(|d| d.q > 0));
        assert!(dims.iter().any(|d| d.m >= 2));
        assert!(dims.iter().any(|d| d.d >= 2 && d.l >= 2));
        assert!(dims.iter().all(|d| d.d + d.l <= 4));
    }
}

use crate::numkit::{fd_step, DenseMatrix};

use super::{BilevelModel, Dims};

/// A bilevel problem known only through function values.
pub trait ValueOnlyModel: Send + Sync {
    fn dims(&self) -> Dims;
    fn upper_obj(&self, x: &[f64], y: &[f64]) -> f64;
    fn upper_ineq(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn upper_eq(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn lower_obj(&self, x: &[f64], y: &[f64]) -> f64;
    fn lower_cons(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
}

/// Lifts a [`ValueOnlyModel`] to a full [`BilevelModel`] with central
/// differences. First derivatives use `h = 1e-6·max(1,|v|)`; second
/// derivatives use the four-point mixed formula with `h = 1e-4·max(1,|v|)`,
/// which balances truncation against cancellation for second differences.
pub struct FiniteDifferenceModel<M> {
    inner: M,
}

fn second_step(v: f64) -> f64 {
    1e-4 * v.abs().max(1.0)
}

impl<M: ValueOnlyModel> FiniteDifferenceModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn split<'a>(&self, v: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        v.split_at(self.inner.dims().d)
    }

    /// Central-difference Jacobian of a vector function of `v = (x, y)`
    /// with respect to the coordinates in `cols`.
    fn jacobian(
        &self,
        f: impl Fn(&[f64], &[f64]) -> Vec<f64>,
        x: &[f64],
        y: &[f64],
        cols: std::ops::Range<usize>,
    ) -> DenseMatrix {
        let mut v: Vec<f64> = x.iter().chain(y).copied().collect();
        let rows = {
            let (a, b) = self.split(&v);
            f(a, b).len()
        };
        let mut jac = DenseMatrix::zeros(rows, cols.len());
        for (c, j) in cols.enumerate() {
            let orig = v[j];
            let h = fd_step(orig);
            v[j] = orig + h;
            let plus = {
                let (a, b) = self.split(&v);
                f(a, b)
            };
            v[j] = orig - h;
            let minus = {
                let (a, b) = self.split(&v);
                f(a, b)
            };
            v[j] = orig;
            for i in 0..rows {
                jac[(i, c)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// Mixed second differences of a scalar function of `v = (x, y)`;
    /// rows are y-coordinates, columns are the coordinates in `cols`.
    fn second(
        &self,
        f: impl Fn(&[f64], &[f64]) -> f64,
        x: &[f64],
        y: &[f64],
        cols: std::ops::Range<usize>,
    ) -> DenseMatrix {
        let Dims { d, l, .. } = self.inner.dims();
        let mut v: Vec<f64> = x.iter().chain(y).copied().collect();
        let eval = |v: &[f64]| {
            let (a, b) = v.split_at(d);
            f(a, b)
        };
        let mut out = DenseMatrix::zeros(l, cols.len());
        let col0 = cols.start;
        for i in 0..l {
            let a = d + i;
            for (c, b) in cols.clone().enumerate() {
                // Symmetric yy blocks: fill the upper triangle, mirror below.
                if col0 == d && b < a {
                    continue;
                }
                let (va, vb) = (v[a], v[b]);
                let (ha, hb) = (second_step(va), second_step(vb));
                let mut corner = |sa: f64, sb: f64| {
                    v[a] = va + sa * ha;
                    v[b] += sb * hb;
                    let val = eval(&v);
                    v[a] = va;
                    v[b] = vb;
                    val
                };
                let val = if a == b {
                    let fp = corner(2.0, 0.0);
                    let fm = corner(-2.0, 0.0);
                    let f0 = corner(0.0, 0.0);
                    (fp - 2.0 * f0 + fm) / (4.0 * ha * ha)
                } else {
                    (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                        / (4.0 * ha * hb)
                };
                out[(i, c)] = val;
                if col0 == d {
                    out[(b - d, a - d)] = val;
                }
            }
        }
        out
    }
}

impl<M: ValueOnlyModel> BilevelModel for FiniteDifferenceModel<M> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    fn upper_obj(&self, x: &[f64], y: &[f64]) -> f64 {
        self.inner.upper_obj(x, y)
    }

    fn upper_obj_grad(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let Dims { d, l, .. } = self.dims();
        let j = self.jacobian(|a, b| vec![self.inner.upper_obj(a, b)], x, y, 0..d + l);
        (j.row(0)[..d].to_vec(), j.row(0)[d..].to_vec())
    }

    fn upper_ineq(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.inner.upper_ineq(x, y)
    }

    fn upper_ineq_jac(&self, x: &[f64], y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let Dims { d, l, .. } = self.dims();
        let f = |a: &[f64], b: &[f64]| self.inner.upper_ineq(a, b);
        (self.jacobian(f, x, y, 0..d), self.jacobian(f, x, y, d..d + l))
    }

    fn upper_eq(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.inner.upper_eq(x, y)
    }

    fn upper_eq_jac(&self, x: &[f64], y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let Dims { d, l, .. } = self.dims();
        let f = |a: &[f64], b: &[f64]| self.inner.upper_eq(a, b);
        (self.jacobian(f, x, y, 0..d), self.jacobian(f, x, y, d..d + l))
    }

    fn lower_obj(&self, x: &[f64], y: &[f64]) -> f64 {
        self.inner.lower_obj(x, y)
    }

    fn lower_obj_grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let Dims { d, l, .. } = self.dims();
        self.jacobian(|a, b| vec![self.inner.lower_obj(a, b)], x, y, d..d + l)
            .row(0)
            .to_vec()
    }

    fn lower_obj_hess_yy(&self, x: &[f64], y: &[f64]) -> DenseMatrix {
        let Dims { d, l, .. } = self.dims();
        self.second(|a, b| self.inner.lower_obj(a, b), x, y, d..d + l)
    }

    fn lower_obj_hess_xy(&self, x: &[f64], y: &[f64]) -> DenseMatrix {
        let d = self.dims().d;
        self.second(|a, b| self.inner.lower_obj(a, b), x, y, 0..d)
    }

    fn lower_cons(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.inner.lower_cons(x, y)
    }

    fn lower_cons_jac(&self, x: &[f64], y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let Dims { d, l, .. } = self.dims();
        let f = |a: &[f64], b: &[f64]| self.inner.lower_cons(a, b);
        (self.jacobian(f, x, y, 0..d), self.jacobian(f, x, y, d..d + l))
    }

    fn lower_cons_hess_yy(&self, i: usize, x: &[f64], y: &[f64]) -> DenseMatrix {
        let Dims { d, l, .. } = self.dims();
        self.second(|a, b| self.inner.lower_cons(a, b)[i], x, y, d..d + l)
    }

    fn lower_cons_hess_xy(&self, i: usize, x: &[f64], y: &[f64]) -> DenseMatrix {
        let d = self.dims().d;
        self.second(|a, b| self.inner.lower_cons(a, b)[i], x, y, 0..d)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::problem::{corpus_get, validate_derivatives, BilevelProblem, sample_points};

    /// qp_kink given only by values.
    struct KinkValues;

    impl ValueOnlyModel for KinkValues {
        fn dims(&self) -> Dims {
            Dims { d: 1, l: 1, m: 1, p: 0, q: 0 }
        }
        fn upper_obj(&self, x: &[f64], y: &[f64]) -> f64 {
            (x[0] - 1.0).powi(2) + (y[0] - 1.0).powi(2)
        }
        fn lower_obj(&self, x: &[f64], y: &[f64]) -> f64 {
            0.5 * y[0] * y[0] - x[0] * y[0]
        }
        fn lower_cons(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
            vec![-y[0]]
        }
    }

    /// Non-polynomial two-variable lower level.
    struct Curvy;

    impl ValueOnlyModel for Curvy {
        fn dims(&self) -> Dims {
            Dims { d: 2, l: 2, m: 1, p: 1, q: 0 }
        }
        fn upper_obj(&self, x: &[f64], y: &[f64]) -> f64 {
            (x[0] * y[1]).sin() + x[1] * x[1]
        }
        fn upper_ineq(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
            vec![x[0] + y[0] - 1.0]
        }
        fn lower_obj(&self, x: &[f64], y: &[f64]) -> f64 {
            (0.3 * y[0] * x[1]).exp() + y[0] * y[0] * y[1] + x[0] * y[1] * y[1]
        }
        fn lower_cons(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
            vec![y[0] * y[0] + (x[0] * y[1]).cos() - 2.0]
        }
    }

    #[test]
    fn matches_analytic_qp_kink() {
        let fd = FiniteDifferenceModel::new(KinkValues);
        let exact = corpus_get("qp_kink").unwrap();
        for (x, y) in sample_points(&exact, 20, 4) {
            let a = exact.model();
            assert!((fd.lower_obj_grad_y(&x, &y)[0] - a.lower_obj_grad_y(&x, &y)[0]).abs() < 1e-8);
            assert!(fd.lower_obj_hess_yy(&x, &y).sub(&a.lower_obj_hess_yy(&x, &y)).max_abs() < 1e-6);
            assert!(fd.lower_obj_hess_xy(&x, &y).sub(&a.lower_obj_hess_xy(&x, &y)).max_abs() < 1e-6);
        }
    }

    #[test]
    fn lifted_problem_passes_validation() {
        let model = Arc::new(FiniteDifferenceModel::new(Curvy));
        let p = BilevelProblem::new("curvy", model, (vec![0.2, 0.1], vec![0.5, -0.3])).unwrap();
        let pts = sample_points(&p, 10, 8);
        // The validator differentiates the lifted first derivatives once more,
        // so its own noise is ~1e-4 here.
        let report = validate_derivatives(&p, &pts, 1e-3);
        assert!(report.all_passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}

//! Small dense linear algebra and finite-difference helpers.
//!
//! Every system solved by the smoothing calculus is `(l+m) x (l+m)` with
//! `l` and `m` in the single digits, so a plain row-major matrix with an LU
//! factorization is all that is needed.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * c);
        for r in rows {
            assert_eq!(r.len(), c, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: n,
            cols: c,
            data,
        }
    }

    /// Single-column matrix.
    pub fn column(v: &[f64]) -> Self {
        Self::from_row_major(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matrix-vector dimensions differ");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matrix-vector dimensions differ");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::from_row_major(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_row_major(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        Self::from_row_major(self.rows, self.cols, self.data.iter().map(|a| a * s).collect())
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, s: f64, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// `self += s · u vᵀ`
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        assert_eq!((self.rows, self.cols), (u.len(), v.len()));
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                self[(i, j)] += s * ui * vj;
            }
        }
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &DenseMatrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> DenseMatrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    /// Replaces the matrix with `(A + Aᵀ)/2`. Square matrices only.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|a| a.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        inf_norm(&self.data)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// LU factorization with partial (row) pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct LuFactor {
    lu: DenseMatrix,
    perm: Vec<usize>,
}

/// Pivots below `PIVOT_REL_TOL · ‖A‖_∞` are treated as zero.
pub const PIVOT_REL_TOL: f64 = 1e-14;

impl LuFactor {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::ShapeMismatch {
                what: "LU factorization (columns)",
                expected: a.rows,
                got: a.cols,
            });
        }
        let n = a.rows;
        let threshold = PIVOT_REL_TOL * a.norm_inf();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot > threshold) {
                return Err(Error::SingularMatrix {
                    pivot: pivot.max(0.0),
                    threshold,
                });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            let piv = lu[(k, k)];
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / piv;
                lu[(i, k)] = factor;
                if factor != 0.0 {
                    for j in (k + 1)..n {
                        lu[(i, j)] -= factor * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc / self.lu[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(b.rows, self.dim());
        let mut out = DenseMatrix::zeros(b.rows, b.cols);
        for j in 0..b.cols {
            let xj = self.solve_vec(&b.col(j));
            for (i, v) in xj.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// Solves `A X = B` for square `A`.
pub fn solve_dense(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if b.rows != a.rows {
        return Err(Error::ShapeMismatch {
            what: "right-hand side rows",
            expected: a.rows,
            got: b.rows,
        });
    }
    Ok(LuFactor::new(a)?.solve(b))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max absolute entry; `0` for an empty slice.
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `a + s·b`
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Default central-difference step for a coordinate of magnitude `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

/// Central-difference Jacobian with a fixed step for every coordinate.
pub fn central_diff_jacobian<F>(mut f: F, at: &[f64], step: f64) -> Result<DenseMatrix>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    jacobian_with_steps(&mut f, at, |_| step)
}

/// Central-difference Jacobian using [`fd_step`] per coordinate.
pub fn central_diff_jacobian_scaled<F>(mut f: F, at: &[f64]) -> Result<DenseMatrix>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    jacobian_with_steps(&mut f, at, fd_step)
}

fn jacobian_with_steps<F, S>(f: &mut F, at: &[f64], step_for: S) -> Result<DenseMatrix>
where
    F: FnMut(&[f64]) -> Vec<f64>,
    S: Fn(f64) -> f64,
{
    let mut probe = at.to_vec();
    let mut jac: Option<DenseMatrix> = None;
    for j in 0..at.len() {
        let h = step_for(at[j]);
        probe[j] = at[j] + h;
        let plus = f(&probe);
        probe[j] = at[j] - h;
        let minus = f(&probe);
        probe[j] = at[j];
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEvaluation(format!(
                "finite-difference probe along coordinate {j}"
            )));
        }
        let jac = jac.get_or_insert_with(|| DenseMatrix::zeros(plus.len(), at.len()));
        for i in 0..plus.len() {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
        if !jac.is_finite() {
            return Err(Error::NonFiniteEvaluation(format!(
                "finite-difference quotient along coordinate {j}"
            )));
        }
    }
    match jac {
        Some(j) => Ok(j),
        // No coordinates: the output dimension is whatever `f` reports.
        None => {
            let rows = f(at).len();
            Ok(DenseMatrix::zeros(rows, 0))
        }
    }
}

/// Central-difference gradient of a scalar function (steps from [`fd_step`]).
pub fn central_diff_gradient<F>(mut f: F, at: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let jac = central_diff_jacobian_scaled(|v| vec![f(v)], at)?;
    Ok(jac.row(0).to_vec())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues(a: &DenseMatrix) -> Vec<f64> {
    assert_eq!(a.rows, a.cols, "eigenvalues need a square matrix");
    let n = a.rows;
    let mut m = a.clone();
    m.symmetrize();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= 1e-30 * m.data.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Singular values by one-sided Jacobi, descending.
pub fn singular_values(a: &DenseMatrix) -> Vec<f64> {
    // Work on the orientation with fewer columns.
    let mut u = if a.cols <= a.rows { a.clone() } else { a.transpose() };
    let (rows, cols) = (u.rows, u.cols);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    alpha += u[(i, p)] * u[(i, p)];
                    beta += u[(i, q)] * u[(i, q)];
                    gamma += u[(i, p)] * u[(i, q)];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols).map(|j| norm2(&u.col(j))).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
        // Diagonally dominant with random signs.
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = rng.random_range(-1.0..1.0);
            }
            a[(i, i)] += (n as f64) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        a
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let b = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![0.5, 7.0]]);
        let x = solve_dense(&DenseMatrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn diagonal_solve() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let b = DenseMatrix::from_rows(&[vec![2.0], vec![8.0]]);
        let x = solve_dense(&a, &b).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn recovers_known_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_well_conditioned(&mut rng, 8);
        let mut xs = DenseMatrix::zeros(8, 3);
        for i in 0..8 {
            for j in 0..3 {
                xs[(i, j)] = rng.random_range(-5.0..5.0);
            }
        }
        let b = a.matmul(&xs);
        let x = solve_dense(&a, &b).unwrap();
        assert!(x.sub(&xs).max_abs() < 1e-9);
    }

    #[test]
    fn residual_bound_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..1000 {
            let n = 1 + trial % 20;
            let a = random_well_conditioned(&mut rng, n);
            let mut b = DenseMatrix::zeros(n, 2);
            for i in 0..n {
                b[(i, 0)] = rng.random_range(-10.0..10.0);
                b[(i, 1)] = rng.random_range(-10.0..10.0);
            }
            let x = solve_dense(&a, &b).unwrap();
            let res = a.matmul(&x).sub(&b).max_abs();
            let bound = 1e-10 * (1.0 + a.norm_inf() * x.max_abs());
            assert!(res <= bound, "trial {trial}: residual {res:e} > {bound:e}");
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        let err = solve_dense(&a, &DenseMatrix::identity(2)).unwrap_err();
        assert!(matches!(err, Error::SingularMatrix { .. }));
    }

    #[test]
    fn rhs_shape_checked() {
        let err = solve_dense(&DenseMatrix::identity(2), &DenseMatrix::zeros(3, 1)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn fd_identity_and_constant() {
        let j = central_diff_jacobian(|v| v.to_vec(), &[0.3, -2.0, 5.0], 1e-6).unwrap();
        assert!(j.sub(&DenseMatrix::identity(3)).max_abs() < 1e-9);
        let j = central_diff_jacobian(|_| vec![4.0, 1.0], &[1.0, 2.0], 1e-6).unwrap();
        assert_eq!(j.max_abs(), 0.0);
    }

    #[test]
    fn fd_polynomial_jacobian() {
        let j = central_diff_jacobian(|v| vec![v[0] * v[0], v[0] * v[1]], &[1.0, 2.0], 1e-6).unwrap();
        let expected = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![2.0, 1.0]]);
        assert!(j.sub(&expected).max_abs() < 1e-6);
    }

    #[test]
    fn fd_quadratics_match_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let at: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            // f_i(v) = Σ_j q_ij v_j^2 + v_i v_{i+1}
            let f = |v: &[f64]| -> Vec<f64> {
                (0..3)
                    .map(|i| (0..3).map(|j| q[3 * i + j] * v[j] * v[j]).sum::<f64>() + v[i] * v[(i + 1) % 3])
                    .collect()
            };
            let mut exact = DenseMatrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    exact[(i, j)] = 2.0 * q[3 * i + j] * at[j];
                }
                exact[(i, i)] += at[(i + 1) % 3];
                exact[(i, (i + 1) % 3)] += at[i];
            }
            let j = central_diff_jacobian(f, &at, 1e-6).unwrap();
            assert!(j.sub(&exact).max_abs() < 1e-6);
        }
    }

    #[test]
    fn fd_reports_non_finite() {
        let err = central_diff_jacobian(|v| vec![1.0 / v[0]], &[0.0], 1e-300).unwrap_err();
        assert!(matches!(err, Error::NonFiniteEvaluation(_)));
        let err = central_diff_jacobian(|v| vec![(v[0]).ln()], &[0.0], 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonFiniteEvaluation(_)));
    }

    #[test]
    fn inf_norm_cases() {
        assert_eq!(inf_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(inf_norm(&[-3.0, 1.0]), 3.0);
        assert_eq!(inf_norm(&[]), 0.0);
    }

    #[test]
    fn eigen_and_singular_values() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let e = sym_eigenvalues(&a);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
        let b = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -4.0], vec![0.0, 0.0]]);
        let s = singular_values(&b);
        assert!((s[0] - 4.0).abs() < 1e-12 && (s[1] - 3.0).abs() < 1e-12);
        let dup = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let s = singular_values(&dup);
        assert!(s[1] < 1e-12 * s[0]);
    }
}

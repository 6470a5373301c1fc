//! Evaluation measures: value function, Infease, objective ratios, a
//! brute-force grid oracle and an LICQ rank check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::inner::{follow_path, PathOptions};
use crate::numkit::{inf_norm, singular_values, DenseMatrix};
use crate::problem::{BilevelProblem, SearchBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueOptions {
    /// Number of starts, the default start included.
    pub starts: usize,
    /// Standard deviation of the perturbation applied to the extra starts.
    pub spread: f64,
    pub seed: u64,
    pub rho: f64,
    /// Barrier parameter at the end of the path.
    pub r_final: f64,
    /// Required `‖C‖_∞` and lower feasibility for a start to count.
    pub tol: f64,
}

impl Default for ValueOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            spread: 0.5,
            seed: 0,
            rho: 2.0,
            r_final: 1e-12,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub y: Vec<f64>,
    pub converged_starts: usize,
}

/// `V(x) = min_y { f(x,y) : g(x,y) ≤ 0 }`, estimated by following the
/// smoothed path to a tiny barrier parameter from several starts.
pub fn value_function(prob: &BilevelProblem, x: &[f64], opts: &ValueOptions) -> Result<f64> {
    value_function_detail(prob, x, opts).map(|v| v.value)
}

pub fn value_function_detail(prob: &BilevelProblem, x: &[f64], opts: &ValueOptions) -> Result<ValueEstimate> {
    let dims = prob.dims();
    check_len("x", x, dims.d)?;
    if opts.starts == 0 || !(opts.r_final > 0.0) || !(opts.rho > 0.0) {
        return Err(Error::InvalidParameter(
            "value function needs at least one start and positive r_final, rho".into(),
        ));
    }
    let (_, y0) = prob.default_start();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![y0.to_vec()];
    for _ in 1..opts.starts {
        starts.push(
            y0.iter()
                .map(|v| {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    v + opts.spread * xi
                })
                .collect(),
        );
    }
    let path = PathOptions {
        tol: 1e-2 * opts.tol,
        outer_loops: 100,
        ..PathOptions::default()
    };
    let s0 = vec![0.0; dims.m];
    let mut best: Option<ValueEstimate> = None;
    let mut converged = 0;
    for y in starts {
        let Ok(point) = follow_path(prob, x, opts.r_final, opts.rho, &y, &s0, &path) else {
            continue;
        };
        let Ok((f, g)) = prob.eval_lower_value(x, &point.y) else {
            continue;
        };
        if point.residual > opts.tol || g.iter().any(|&v| v > opts.tol) {
            continue;
        }
        converged += 1;
        if best.as_ref().is_none_or(|b| f < b.value) {
            best = Some(ValueEstimate {
                value: f,
                y: point.y,
                converged_starts: 0,
            });
        }
    }
    let mut best = best.ok_or(Error::ValueFunctionFailure)?;
    best.converged_starts = converged;
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfeaseOptions {
    pub value: ValueOptions,
    /// A run is applicable when its (clamped) total is below this.
    pub threshold: f64,
}

impl Default for InfeaseOptions {
    fn default() -> Self {
        Self {
            value: ValueOptions::default(),
            threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfeaseBreakdown {
    /// `‖max(G, 0)‖_∞`
    pub upper_ineq: f64,
    /// `‖H‖_∞`
    pub upper_eq: f64,
    /// `‖max(g, 0)‖_∞`
    pub lower_ineq: f64,
    /// `f(x, y) − V(x)`, raw (may be slightly negative); `None` when `V` failed.
    pub optimality_gap: Option<f64>,
    pub value_function: Option<f64>,
    /// Sum of the four parts with the raw gap.
    pub total: f64,
    /// False when the gap could not be estimated.
    pub reliable: bool,
    /// Total with the gap clamped at zero is below the threshold.
    pub applicable: bool,
}

fn positive_part_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &a| acc.max(a))
}

pub fn infeasibility(prob: &BilevelProblem, x: &[f64], y: &[f64], opts: &InfeaseOptions) -> Result<InfeaseBreakdown> {
    let u = prob.eval_upper(x, y)?;
    let (f, g) = prob.eval_lower_value(x, y)?;
    let upper_ineq = positive_part_max(&u.ineq);
    let upper_eq = inf_norm(&u.eq);
    let lower_ineq = positive_part_max(&g);
    let constraints = upper_ineq + upper_eq + lower_ineq;
    let value = match value_function(prob, x, &opts.value) {
        Ok(v) => Some(v),
        Err(Error::ValueFunctionFailure) => None,
        Err(e) => return Err(e),
    };
    let gap = value.map(|v| f - v);
    let total = constraints + gap.unwrap_or(0.0);
    let applicable = gap.is_some_and(|gap| constraints + gap.max(0.0) < opts.threshold);
    Ok(InfeaseBreakdown {
        upper_ineq,
        upper_eq,
        lower_ineq,
        optimality_gap: gap,
        value_function: value,
        total,
        reliable: gap.is_some(),
        applicable,
    })
}

/// `R_F = (F − F*)/(1 + |F*|)` and likewise for `f`.
pub fn ratios(upper_obj: f64, lower_obj: f64, upper_star: f64, lower_star: f64) -> (f64, f64) {
    (
        (upper_obj - upper_star) / (1.0 + upper_star.abs()),
        (lower_obj - lower_star) / (1.0 + lower_star.abs()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Every grid point at the target resolution.
    Exhaustive,
    /// Coarse grid refined around the best candidates.
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    pub resolution: f64,
    /// Largest `N_x · N_y` scanned exhaustively; beyond it the grid is refined
    /// hierarchically.
    pub max_exhaustive: f64,
    /// Points per axis on the coarse level.
    pub coarse_points: usize,
    /// Candidates kept per refinement level, upper and lower.
    pub keep_upper: usize,
    pub keep_lower: usize,
}

impl OracleOptions {
    pub fn new(resolution: f64) -> Self {
        Self {
            resolution,
            max_exhaustive: 2e6,
            coarse_points: 21,
            keep_upper: 8,
            keep_lower: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub upper_obj: f64,
    pub lower_obj: f64,
    pub resolution: f64,
    pub search_box: SearchBox,
    pub mode: OracleMode,
    /// Number of `(x, y)` evaluations spent.
    pub evaluations: usize,
}

/// Points per axis so that consecutive points are at most `step` apart.
fn points_for(lo: f64, hi: f64, step: f64) -> usize {
    (((hi - lo) / step).ceil() as usize).max(1) + 1
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Calls `f` on every point of the tensor grid spanned by `axes`.
fn for_each_point(axes: &[Vec<f64>], mut f: impl FnMut(&[f64]) -> Result<()>) -> Result<()> {
    if axes.is_empty() {
        return f(&[]);
    }
    let mut idx = vec![0usize; axes.len()];
    let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    loop {
        f(&point)?;
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                point[k] = axes[k][idx[k]];
                break;
            }
            idx[k] = 0;
            point[k] = axes[k][0];
            k += 1;
            if k == axes.len() {
                return Ok(());
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    point: Vec<f64>,
    value: f64,
    extra: Vec<f64>,
    extra_value: f64,
}

/// Ascending by value, then lexicographically by point.
fn order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.value.total_cmp(&b.value).then_with(|| {
        a.point
            .iter()
            .zip(&b.point)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

fn keep_best(mut c: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    c.sort_by(order);
    c.dedup_by(|a, b| a.point == b.point);
    c.truncate(k);
    c
}

/// Minimizes `value` over a box with a grid search.
///
/// `value(point, eq_tol)` returns `None` for infeasible points. Inequalities
/// are held to `2·resolution` on every level since a grid always gets that
/// close to an inequality boundary; `eq_tol` is twice the current step, as a
/// coarse grid cannot hit an equality manifold more closely. In hierarchical
/// mode each level shrinks the step by five around the kept candidates.
fn grid_minimize(
    bounds: &[(f64, f64)],
    resolution: f64,
    hierarchical: bool,
    coarse: usize,
    keep: usize,
    mut value: impl FnMut(&[f64], f64) -> Result<Option<Candidate>>,
) -> Result<Option<Candidate>> {
    if !hierarchical {
        let axes: Vec<Vec<f64>> = bounds
            .iter()
            .map(|&(lo, hi)| axis(lo, hi, points_for(lo, hi, resolution)))
            .collect();
        let mut best: Option<Candidate> = None;
        for_each_point(&axes, |p| {
            if let Some(c) = value(p, 2.0 * resolution)? {
                if best.as_ref().is_none_or(|b| order(&c, b).is_lt()) {
                    best = Some(c);
                }
            }
            Ok(())
        })?;
        return Ok(best);
    }
    let mut steps: Vec<f64> = bounds
        .iter()
        .map(|&(lo, hi)| (hi - lo) / (coarse.max(2) - 1) as f64)
        .collect();
    let coarse_axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| axis(lo, hi, coarse.max(2))).collect();
    let level_tol = |steps: &[f64]| 2.0 * steps.iter().fold(resolution, |a, &b| a.max(b));
    let mut found = Vec::new();
    let tol = level_tol(&steps);
    for_each_point(&coarse_axes, |p| {
        if let Some(c) = value(p, tol)? {
            found.push(c);
        }
        Ok(())
    })?;
    let mut kept = keep_best(found, keep);
    while steps.iter().any(|&h| h > resolution) && !kept.is_empty() {
        let windows = steps.clone();
        steps.iter_mut().for_each(|h| *h = (*h / 5.0).min(*h));
        let tol = level_tol(&steps);
        let mut found = Vec::new();
        for c in &kept {
            let axes: Vec<Vec<f64>> = bounds
                .iter()
                .zip(&c.point)
                .zip(&windows)
                .map(|((&(lo, hi), &ci), &w)| {
                    let (a, b) = ((ci - w).max(lo), (ci + w).min(hi));
                    axis(a, b, if w > resolution { 11 } else { 1 })
                })
                .collect();
            // Degenerate windows collapse to the candidate coordinate.
            let axes: Vec<Vec<f64>> = axes
                .into_iter()
                .zip(&c.point)
                .map(|(a, &ci)| if a.len() == 1 { vec![ci] } else { a })
                .collect();
            for_each_point(&axes, |p| {
                if let Some(c) = value(p, tol)? {
                    found.push(c);
                }
                Ok(())
            })?;
        }
        kept = keep_best(found, keep);
    }
    Ok(kept.into_iter().next())
}

/// Grid minimum of the lower problem at `x`: `(y, f)` among `y` in the box
/// with `g ≤ 2·resolution`, or `None` when no grid point is feasible.
pub fn lower_grid_min(prob: &BilevelProblem, x: &[f64], opts: &OracleOptions) -> Result<Option<(Vec<f64>, f64)>> {
    let b = prob
        .search_box()
        .ok_or_else(|| Error::InvalidParameter(format!("{} has no search box", prob.name())))?;
    let ny: f64 = b.y.iter().map(|&(lo, hi)| points_for(lo, hi, opts.resolution) as f64).product();
    let mut evals = 0;
    let c = lower_search(prob, x, &b.y, opts, ny > opts.max_exhaustive, &mut evals)?;
    Ok(c.map(|c| (c.point, c.value)))
}

fn lower_search(
    prob: &BilevelProblem,
    x: &[f64],
    bounds: &[(f64, f64)],
    opts: &OracleOptions,
    hierarchical: bool,
    evals: &mut usize,
) -> Result<Option<Candidate>> {
    let tol = 2.0 * opts.resolution;
    grid_minimize(bounds, opts.resolution, hierarchical, opts.coarse_points, opts.keep_lower, |y, _| {
        *evals += 1;
        let (f, g) = prob.eval_lower_value(x, y)?;
        Ok(g.iter().all(|&v| v <= tol).then(|| Candidate {
            point: y.to_vec(),
            value: f,
            extra: Vec::new(),
            extra_value: 0.0,
        }))
    })
}

pub fn grid_oracle(prob: &BilevelProblem, resolution: f64) -> Result<OracleSolution> {
    grid_oracle_with(prob, &OracleOptions::new(resolution))
}

/// Brute-force bilevel solution on a grid over the problem's box.
///
/// For every `x` on the grid the lower problem is minimized over the `y`
/// grid; `F` is then minimized over pairs `(x, y*(x))` with `G ≤ 2·resolution`
/// and `|H| ≤ 2·resolution` (looser on coarse levels, see `grid_minimize`). Ties are broken lexicographically in `x`, so the result is
/// deterministic.
pub fn grid_oracle_with(prob: &BilevelProblem, opts: &OracleOptions) -> Result<OracleSolution> {
    let dims = prob.dims();
    if dims.d + dims.l > 4 {
        return Err(Error::IntractableDimension(dims.d + dims.l));
    }
    if !(opts.resolution > 0.0 && opts.resolution.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "resolution must be positive, got {}",
            opts.resolution
        )));
    }
    let b = prob
        .search_box()
        .ok_or_else(|| Error::InvalidParameter(format!("{} has no search box", prob.name())))?
        .clone();
    let count = |bounds: &[(f64, f64)]| -> f64 {
        bounds
            .iter()
            .map(|&(lo, hi)| points_for(lo, hi, opts.resolution) as f64)
            .product()
    };
    let (nx, ny) = (count(&b.x), count(&b.y));
    let hierarchical = nx * ny > opts.max_exhaustive;
    let lower_hier = ny > opts.max_exhaustive || hierarchical;
    let mut evals = 0usize;
    let best = grid_minimize(&b.x, opts.resolution, hierarchical, opts.coarse_points, opts.keep_upper, |x, tol| {
        let Some(low) = lower_search(prob, x, &b.y, opts, lower_hier, &mut evals)? else {
            return Ok(None);
        };
        evals += 1;
        let u = prob.eval_upper(x, &low.point)?;
        let feasible = u.ineq.iter().all(|&v| v <= 2.0 * opts.resolution) && u.eq.iter().all(|&v| v.abs() <= tol);
        Ok(feasible.then(|| Candidate {
            point: x.to_vec(),
            value: u.obj,
            extra: low.point,
            extra_value: low.value,
        }))
    })?
    .ok_or(Error::NoFeasiblePoint)?;
    Ok(OracleSolution {
        x: best.point,
        y: best.extra,
        upper_obj: best.value,
        lower_obj: best.extra_value,
        resolution: opts.resolution,
        search_box: b,
        mode: if hierarchical {
            OracleMode::Hierarchical
        } else {
            OracleMode::Exhaustive
        },
        evaluations: evals,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LicqReport {
    pub rank: usize,
    pub active_count: usize,
    pub holds: bool,
    /// Indices with `g_i ≥ −tol`.
    pub active: Vec<usize>,
}

/// Numerical rank of the active lower constraint gradients `∇_y g_i`.
pub fn check_licq(prob: &BilevelProblem, x: &[f64], y: &[f64], tol: f64) -> Result<LicqReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("activity tolerance must be positive, got {tol}")));
    }
    let first = prob.eval_lower_first(x, y)?;
    let active: Vec<usize> = (0..first.g.len()).filter(|&i| first.g[i] >= -tol).collect();
    let rows: Vec<Vec<f64>> = active.iter().map(|&i| first.jac_y_g.row(i).to_vec()).collect();
    let rank = if rows.is_empty() {
        0
    } else {
        let sv = singular_values(&DenseMatrix::from_rows(&rows));
        let top = sv.first().copied().unwrap_or(0.0);
        sv.iter().filter(|&&v| top > 0.0 && v > 1e-8 * top).count()
    };
    Ok(LicqReport {
        rank,
        active_count: active.len(),
        holds: rank == active.len(),
        active,
    })
}

//! Polynomial problems and the plain-text problem format.
//!
//! A problem file is a list of `key = value` lines; `#` starts a comment.
//!
//! ```text
//! name  = lin_upper_con
//! dims  = 1 1                # d l
//! x0    = 0.5                # default start, d numbers
//! y0    = 0.5                # l numbers
//! xbox  = -2 2               # "lo hi" pairs separated by ','; one pair broadcasts
//! ybox  = -2 2
//! F     = x1^2 - 2*x1 + 1 + y1^2 - 2*y1 + 1
//! f     = 0.5*y1^2 - x1*y1
//! g1    = -y1                # lower inequalities g1..gm, g_i <= 0
//! G1    = x1 - 0.75          # upper inequalities G1..Gp, G_i <= 0
//! H1    = x1 + y1 - 2        # upper equalities H1..Hq
//! ref_x = 0.75               # optional reference solution
//! ref_y = 0.75
//! ref_F = 0.125
//! ref_f = -0.28125
//! ref_source = analytic      # or `oracle`
//! description = free text
//! ```
//!
//! Expressions are sums of `coefficient * monomial` terms:
//!
//! ```text
//! expr     := ['+'|'-'] term (('+'|'-') term)*
//! term     := number | [number '*'] factor ('*' factor)*
//! factor   := var ['^' integer]
//! var      := 'x' index | 'y' index        (1-based)
//! ```
//!
//! Derivatives are computed symbolically, so polynomial problems carry exact
//! analytic derivatives of every order.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

use super::{BilevelModel, BilevelProblem, Dims, Reference, ReferenceSource, SearchBox};

/// Multivariate polynomial over a fixed number of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: Vec<(f64, Vec<u32>)>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: Vec::new() }
    }

    /// Builds a polynomial from `(coefficient, exponents)` terms, merging
    /// duplicate monomials and dropping zero coefficients.
    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (f64, Vec<u32>)>) -> Self {
        let mut merged: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (c, e) in terms {
            assert_eq!(e.len(), nvars, "exponent vector has wrong length");
            *merged.entry(e).or_insert(0.0) += c;
        }
        let terms = merged.into_iter().filter(|(_, c)| *c != 0.0).map(|(e, c)| (c, e)).collect();
        Self { nvars, terms }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.nvars);
        self.terms
            .iter()
            .map(|(c, e)| {
                e.iter()
                    .zip(v)
                    .filter(|(k, _)| **k > 0)
                    .fold(*c, |acc, (&k, &x)| acc * x.powi(k as i32))
            })
            .sum()
    }

    pub fn partial(&self, var: usize) -> Polynomial {
        let terms = self.terms.iter().filter(|(_, e)| e[var] > 0).map(|(c, e)| {
            let mut e = e.clone();
            let k = e[var];
            e[var] -= 1;
            (c * k as f64, e)
        });
        Polynomial::from_terms(self.nvars, terms)
    }

    /// Parses an expression over `x1..x{d}` and `y1..y{l}`.
    pub fn parse(src: &str, d: usize, l: usize) -> std::result::Result<Self, String> {
        Parser::new(src, d, l).expression()
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    d: usize,
    l: usize,
}

impl Parser {
    fn new(src: &str, d: usize, l: usize) -> Self {
        Self {
            chars: src.chars().filter(|c| !c.is_whitespace()).collect(),
            pos: 0,
            d,
            l,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expression(&mut self) -> std::result::Result<Polynomial, String> {
        let nvars = self.d + self.l;
        if self.chars.is_empty() {
            return Err("empty expression".into());
        }
        let mut terms = Vec::new();
        let mut first = true;
        while self.pos < self.chars.len() {
            let sign = if self.eat('-') {
                -1.0
            } else if self.eat('+') || first {
                1.0
            } else {
                return Err(format!("expected '+' or '-' at position {}", self.pos));
            };
            first = false;
            let (c, e) = self.term()?;
            terms.push((sign * c, e));
        }
        Ok(Polynomial::from_terms(nvars, terms))
    }

    fn term(&mut self) -> std::result::Result<(f64, Vec<u32>), String> {
        let mut coef = 1.0;
        let mut exps = vec![0u32; self.d + self.l];
        let mut need_factor = true;
        if matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.') {
            coef = self.number()?;
            if !self.eat('*') {
                return Ok((coef, exps));
            }
        }
        while need_factor {
            let var = self.variable()?;
            let power = if self.eat('^') { self.integer()? } else { 1 };
            exps[var] += power;
            need_factor = self.eat('*');
        }
        Ok((coef, exps))
    }

    fn number(&mut self) -> std::result::Result<f64, String> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.') {
            self.pos += 1;
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            self.pos += 1;
            if matches!(self.peek(), Some('+' | '-')) {
                self.pos += 1;
            }
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse().map_err(|_| format!("bad number `{text}`"))
    }

    fn integer(&mut self) -> std::result::Result<u32, String> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse().map_err(|_| format!("bad exponent `{text}`"))
    }

    fn variable(&mut self) -> std::result::Result<usize, String> {
        let (offset, limit) = match self.peek() {
            Some('x') => (0, self.d),
            Some('y') => (self.d, self.l),
            other => return Err(format!("expected a variable, found {other:?}")),
        };
        let name = self.chars[self.pos];
        self.pos += 1;
        let idx = self.integer()? as usize;
        if idx == 0 || idx > limit {
            return Err(format!("variable {name}{idx} out of range (1..={limit})"));
        }
        Ok(offset + idx - 1)
    }
}

/// Bilevel model whose every function is a polynomial. All derivative
/// polynomials are built once at construction.
#[derive(Debug, Clone)]
pub struct PolyModel {
    dims: Dims,
    upper_obj: Polynomial,
    upper_obj_grad: Vec<Polynomial>,
    upper_ineq: Vec<Polynomial>,
    upper_ineq_grad: Vec<Vec<Polynomial>>,
    upper_eq: Vec<Polynomial>,
    upper_eq_grad: Vec<Vec<Polynomial>>,
    lower_obj: Polynomial,
    /// ∂f/∂y_i
    lower_obj_grad_y: Vec<Polynomial>,
    /// ∂²f/∂y_i∂v_j over all variables v = (x, y)
    lower_obj_hess: Vec<Vec<Polynomial>>,
    lower_cons: Vec<Polynomial>,
    lower_cons_grad: Vec<Vec<Polynomial>>,
    lower_cons_hess: Vec<Vec<Vec<Polynomial>>>,
}

fn gradient(p: &Polynomial) -> Vec<Polynomial> {
    (0..p.nvars()).map(|v| p.partial(v)).collect()
}

impl PolyModel {
    pub fn new(
        d: usize,
        l: usize,
        upper_obj: Polynomial,
        upper_ineq: Vec<Polynomial>,
        upper_eq: Vec<Polynomial>,
        lower_obj: Polynomial,
        lower_cons: Vec<Polynomial>,
    ) -> Self {
        let n = d + l;
        for p in std::iter::once(&upper_obj)
            .chain(&upper_ineq)
            .chain(&upper_eq)
            .chain(std::iter::once(&lower_obj))
            .chain(&lower_cons)
        {
            assert_eq!(p.nvars(), n, "polynomial variable count must be d + l");
        }
        let lower_obj_grad_y: Vec<_> = (d..n).map(|v| lower_obj.partial(v)).collect();
        let lower_obj_hess = lower_obj_grad_y.iter().map(gradient).collect();
        let lower_cons_grad: Vec<Vec<_>> = lower_cons.iter().map(gradient).collect();
        let lower_cons_hess = lower_cons_grad
            .iter()
            .map(|grad| grad[d..].iter().map(gradient).collect())
            .collect();
        Self {
            dims: Dims {
                d,
                l,
                m: lower_cons.len(),
                p: upper_ineq.len(),
                q: upper_eq.len(),
            },
            upper_obj_grad: gradient(&upper_obj),
            upper_ineq_grad: upper_ineq.iter().map(gradient).collect(),
            upper_eq_grad: upper_eq.iter().map(gradient).collect(),
            upper_obj,
            upper_ineq,
            upper_eq,
            lower_obj,
            lower_obj_grad_y,
            lower_obj_hess,
            lower_cons,
            lower_cons_grad,
            lower_cons_hess,
        }
    }

    fn point(x: &[f64], y: &[f64]) -> Vec<f64> {
        x.iter().chain(y).copied().collect()
    }

    fn jac(&self, rows: &[Vec<Polynomial>], v: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let Dims { d, l, .. } = self.dims;
        let mut jx = DenseMatrix::zeros(rows.len(), d);
        let mut jy = DenseMatrix::zeros(rows.len(), l);
        for (i, grad) in rows.iter().enumerate() {
            for j in 0..d {
                jx[(i, j)] = grad[j].eval(v);
            }
            for j in 0..l {
                jy[(i, j)] = grad[d + j].eval(v);
            }
        }
        (jx, jy)
    }

    /// Splits the rows of a "y-gradient by all variables" table into the
    /// yy block (`l x l`) and the xy block (`l x d`).
    fn hess_blocks(&self, rows: &[Vec<Polynomial>], v: &[f64]) -> (DenseMatrix, DenseMatrix) {
        let Dims { d, l, .. } = self.dims;
        let mut yy = DenseMatrix::zeros(l, l);
        let mut xy = DenseMatrix::zeros(l, d);
        for (i, row) in rows.iter().enumerate() {
            for j in 0..l {
                yy[(i, j)] = row[d + j].eval(v);
            }
            for j in 0..d {
                xy[(i, j)] = row[j].eval(v);
            }
        }
        (yy, xy)
    }
}

impl BilevelModel for PolyModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn upper_obj(&self, x: &[f64], y: &[f64]) -> f64 {
        self.upper_obj.eval(&Self::point(x, y))
    }

    fn upper_obj_grad(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let v = Self::point(x, y);
        let g: Vec<f64> = self.upper_obj_grad.iter().map(|p| p.eval(&v)).collect();
        (g[..self.dims.d].to_vec(), g[self.dims.d..].to_vec())
    }

    fn upper_ineq(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let v = Self::point(x, y);
        self.upper_ineq.iter().map(|p| p.eval(&v)).collect()
    }

    fn upper_ineq_jac(&self, x: &[f64], y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        self.jac(&self.upper_ineq_grad, &Self::point(x, y))
    }

    fn upper_eq(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let v = Self::point(x, y);
        self.upper_eq.iter().map(|p| p.eval(&v)).collect()
    }

    fn upper_eq_jac(&self, x: &[f64], y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        self.jac(&self.upper_eq_grad, &Self::point(x, y))
    }

    fn lower_obj(&self, x: &[f64], y: &[f64]) -> f64 {
        self.lower_obj.eval(&Self::point(x, y))
    }

    fn lower_obj_grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let v = Self::point(x, y);
        self.lower_obj_grad_y.iter().map(|p| p.eval(&v)).collect()
    }

    fn lower_obj_hess_yy(&self, x: &[f64], y: &[f64]) -> DenseMatrix {
        self.hess_blocks(&self.lower_obj_hess, &Self::point(x, y)).0
    }

    fn lower_obj_hess_xy(&self, x: &[f64], y: &[f64]) -> DenseMatrix {
        self.hess_blocks(&self.lower_obj_hess, &Self::point(x, y)).1
    }

    fn lower_cons(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let v = Self::point(x, y);
        self.lower_cons.iter().map(|p| p.eval(&v)).collect()
    }

    fn lower_cons_jac(&self, x: &[f64], y: &[f64]) -> (DenseMatrix, DenseMatrix) {
        self.jac(&self.lower_cons_grad, &Self::point(x, y))
    }

    fn lower_cons_hess_yy(&self, i: usize, x: &[f64], y: &[f64]) -> DenseMatrix {
        self.hess_blocks(&self.lower_cons_hess[i], &Self::point(x, y)).0
    }

    fn lower_cons_hess_xy(&self, i: usize, x: &[f64], y: &[f64]) -> DenseMatrix {
        self.hess_blocks(&self.lower_cons_hess[i], &Self::point(x, y)).1
    }
}

fn parse_numbers(line: usize, value: &str) -> Result<Vec<f64>> {
    value
        .split([' ', '\t', ','])
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number `{s}`"),
            })
        })
        .collect()
}

fn parse_box(line: usize, value: &str, n: usize) -> Result<Vec<(f64, f64)>> {
    let pairs: Vec<(f64, f64)> = value
        .split(',')
        .map(|chunk| {
            let nums = parse_numbers(line, chunk)?;
            match nums.as_slice() {
                [lo, hi] => Ok((*lo, *hi)),
                _ => Err(Error::Parse {
                    line,
                    msg: format!("box entry `{}` must be `lo hi`", chunk.trim()),
                }),
            }
        })
        .collect::<Result<_>>()?;
    match pairs.len() {
        1 => Ok(vec![pairs[0]; n]),
        k if k == n => Ok(pairs),
        k => Err(Error::Parse {
            line,
            msg: format!("box has {k} pairs, expected 1 or {n}"),
        }),
    }
}

/// Parses the text format documented at the top of this module.
pub fn parse_problem_file(text: &str) -> Result<BilevelProblem> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        let key = key.trim().to_string();
        if entries.iter().any(|(_, k, _)| *k == key) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate key `{key}`"),
            });
        }
        entries.push((i + 1, key, value.trim().to_string()));
    }
    let get = |key: &str| entries.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()));
    let require = |key: &str| {
        get(key).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing required key `{key}`"),
        })
    };

    let (_, name) = require("name")?;
    let (dl, dims) = require("dims")?;
    let dims = parse_numbers(dl, dims)?;
    let (d, l) = match dims.as_slice() {
        [d, l] if *d >= 1.0 && *l >= 1.0 && d.fract() == 0.0 && l.fract() == 0.0 => (*d as usize, *l as usize),
        _ => {
            return Err(Error::Parse {
                line: dl,
                msg: "dims must be two positive integers `d l`".into(),
            })
        }
    };

    let poly = |key: &str| -> Result<Option<Polynomial>> {
        match get(key) {
            None => Ok(None),
            Some((line, src)) => Polynomial::parse(src, d, l)
                .map(Some)
                .map_err(|msg| Error::Parse { line, msg }),
        }
    };
    let indexed = |prefix: &str| -> Result<Vec<Polynomial>> {
        let mut out = Vec::new();
        while let Some(p) = poly(&format!("{prefix}{}", out.len() + 1))? {
            out.push(p);
        }
        Ok(out)
    };

    let upper_obj = poly("F")?.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "missing required key `F`".into(),
    })?;
    let lower_obj = poly("f")?.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "missing required key `f`".into(),
    })?;
    let lower_cons = indexed("g")?;
    let upper_ineq = indexed("G")?;
    let upper_eq = indexed("H")?;

    let known = |k: &str| {
        matches!(
            k,
            "name" | "dims" | "x0" | "y0" | "xbox" | "ybox" | "F" | "f" | "description"
        ) || k.starts_with("ref_")
            || [("g", lower_cons.len()), ("G", upper_ineq.len()), ("H", upper_eq.len())]
                .iter()
                .any(|(p, n)| {
                    k.strip_prefix(p)
                        .and_then(|i| i.parse::<usize>().ok())
                        .is_some_and(|i| i >= 1 && i <= *n)
                })
    };
    if let Some((line, key, _)) = entries.iter().find(|(_, k, _)| !known(k)) {
        return Err(Error::Parse {
            line: *line,
            msg: format!("unknown or out-of-sequence key `{key}`"),
        });
    }

    let vector = |key: &str, n: usize| -> Result<Option<Vec<f64>>> {
        match get(key) {
            None => Ok(None),
            Some((line, v)) => {
                let nums = parse_numbers(line, v)?;
                if nums.len() != n {
                    return Err(Error::Parse {
                        line,
                        msg: format!("`{key}` needs {n} numbers, found {}", nums.len()),
                    });
                }
                Ok(Some(nums))
            }
        }
    };

    let x0 = vector("x0", d)?.unwrap_or_else(|| vec![0.0; d]);
    let y0 = vector("y0", l)?.unwrap_or_else(|| vec![0.0; l]);
    let model = PolyModel::new(d, l, upper_obj, upper_ineq, upper_eq, lower_obj, lower_cons);
    let mut prob = BilevelProblem::new(name, Arc::new(model), (x0, y0))?;

    match (get("xbox"), get("ybox")) {
        (Some((lx, bx)), Some((ly, by))) => {
            prob = prob.with_box(SearchBox {
                x: parse_box(lx, bx, d)?,
                y: parse_box(ly, by, l)?,
            })?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Parse {
                line: 0,
                msg: "`xbox` and `ybox` must be given together".into(),
            })
        }
    }

    if let Some(x) = vector("ref_x", d)? {
        let y = vector("ref_y", l)?.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "`ref_x` given without `ref_y`".into(),
        })?;
        let scalar = |key: &str| -> Result<f64> {
            let (line, v) = require(key)?;
            v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number for `{key}`"),
            })
        };
        let source = match get("ref_source").map(|(_, v)| v) {
            None | Some("analytic") => ReferenceSource::Analytic,
            Some("oracle") => ReferenceSource::Oracle,
            Some(other) => {
                return Err(Error::Parse {
                    line: get("ref_source").map_or(0, |(l, _)| l),
                    msg: format!("unknown ref_source `{other}`"),
                })
            }
        };
        prob = prob.with_reference(Reference {
            x,
            y,
            upper_obj: scalar("ref_F")?,
            lower_obj: scalar("ref_f")?,
            source,
        })?;
    }
    if let Some((_, desc)) = get("description") {
        prob = prob.with_description(desc);
    }
    Ok(prob)
}

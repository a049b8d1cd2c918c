//! Convex quadratic programs with a separable objective, linear equality
//! rows and box constraints:
//!
//! ```text
//! minimize   Σᵢ qᵢ·xᵢ² + lᵢ·xᵢ + fᵢ·|xᵢ|  + const
//! subject to A·x = d,   loᵢ ≤ xᵢ ≤ hiᵢ
//! ```
//!
//! with `qᵢ ≥ 0` and `fᵢ ≥ 0`. [`solve`] runs an ADMM splitting between the
//! separable part (closed-form proximal step with exact soft-thresholding)
//! and the affine set, polishes the iterate on its guessed active set, and
//! finally moves to the minimum-norm point of the optimal face so that
//! degenerate problems have one well-defined answer.
//!
//! Equality duals follow the convention `∇f(x) = Aᵀλ` at an interior
//! optimum, so on a reciprocity row they read directly as a price.

mod admm;
mod kkt;
mod ldl;
mod polish;

pub use kkt::{check_kkt, KktResiduals};
pub(crate) use polish::minimizing_interval;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Objective terms and bounds of one variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarSpec {
    pub quad: f64,
    pub lin: f64,
    pub abs: f64,
    pub lower: f64,
    pub upper: f64,
}

impl VarSpec {
    pub fn free() -> Self {
        Self {
            quad: 0.0,
            lin: 0.0,
            abs: 0.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn quad(mut self, q: f64) -> Self {
        self.quad = q;
        self
    }

    pub fn lin(mut self, l: f64) -> Self {
        self.lin = l;
        self
    }

    pub fn abs(mut self, f: f64) -> Self {
        self.abs = f;
        self
    }

    pub fn bounds(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    /// Value of this variable's objective terms at `x`.
    pub fn value(&self, x: f64) -> f64 {
        self.quad * x * x + self.lin * x + self.abs * x.abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QpProblem {
    vars: Vec<VarSpec>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    constant: f64,
}

impl QpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, spec: VarSpec) -> usize {
        self.vars.push(spec);
        self.vars.len() - 1
    }

    /// Adds `Σ coef·x[idx] = rhs`. Repeated indices are merged and exact
    /// zeros dropped.
    pub fn add_equality(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) -> usize {
        let mut row: Vec<(usize, f64)> = terms.into_iter().collect();
        row.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (i, c) in row {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        self.rows.push(merged);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn var(&self, i: usize) -> &VarSpec {
        &self.vars[i]
    }

    pub fn vars(&self) -> &[VarSpec] {
        &self.vars
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.constant + self.vars.iter().zip(x).map(|(v, &xi)| v.value(xi)).sum::<f64>()
    }

    /// Multiplies every objective term by `k > 0`.
    pub fn scale_objective(&mut self, k: f64) {
        for v in &mut self.vars {
            v.quad *= k;
            v.lin *= k;
            v.abs *= k;
        }
        self.constant *= k;
    }

    /// Negates equality row `r` and its right-hand side.
    pub fn negate_row(&mut self, r: usize) {
        for (_, c) in &mut self.rows[r] {
            *c = -*c;
        }
        self.rhs[r] = -self.rhs[r];
    }

    pub fn validate(&self) -> Result<(), QpError> {
        for (i, v) in self.vars.iter().enumerate() {
            let bad = |what: &str| Err(QpError::InvalidProblem(format!("variable {i}: {what}")));
            if !(v.quad.is_finite() && v.lin.is_finite() && v.abs.is_finite()) {
                return bad("objective terms must be finite");
            }
            if v.quad < 0.0 || v.abs < 0.0 {
                return bad("quadratic and absolute-value weights must be non-negative");
            }
            if v.lower.is_nan() || v.upper.is_nan() || v.lower > v.upper {
                return bad("invalid box");
            }
            if v.lower == f64::INFINITY || v.upper == f64::NEG_INFINITY {
                return bad("empty box");
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.is_empty() {
                return Err(QpError::InvalidProblem(format!("equality row {r} has no nonzero")));
            }
            if row.iter().any(|&(i, c)| i >= self.vars.len() || !c.is_finite()) || !self.rhs[r].is_finite() {
                return Err(QpError::InvalidProblem(format!("equality row {r} is malformed")));
            }
        }
        if !self.constant.is_finite() {
            return Err(QpError::InvalidProblem("constant must be finite".into()));
        }
        Ok(())
    }

    pub(crate) fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(i, c)| c * x[i]).sum();
        }
    }

    pub(crate) fn mul_transpose(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, &yr) in self.rows.iter().zip(y) {
            if yr != 0.0 {
                for &(i, c) in row {
                    out[i] += c * yr;
                }
            }
        }
    }

    /// Column-wise copy of the equality matrix.
    pub(crate) fn columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.vars.len()];
        for (r, row) in self.rows.iter().enumerate() {
            for &(i, c) in row {
                cols[i].push((r, c));
            }
        }
        cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Max-norm tolerance on every KKT residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial ADMM penalty.
    pub rho: f64,
    /// Residual balancing of the penalty.
    pub adaptive_rho: bool,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    /// Try to solve the reduced KKT system on the guessed active set.
    pub polish: bool,
    /// Return the minimum-norm point of the optimal face.
    pub canonical: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50_000,
            rho: 1.0,
            adaptive_rho: true,
            relaxation: 1.6,
            polish: true,
            canonical: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// One multiplier per equality row.
    pub duals: Vec<f64>,
    pub objective_value: f64,
    pub status: Status,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("no optimal point within {} iterations (best KKT residual {:.3e})", .0.iterations, .0.kkt.max())]
    MaxIterExceeded(Box<QpSolution>),
}

/// Solves `problem`. Deterministic for a fixed problem and options.
pub fn solve(problem: &QpProblem, opts: &SolveOptions) -> Result<QpSolution, QpError> {
    problem.validate()?;
    if !(opts.tol > 0.0 && opts.rho > 0.0 && opts.relaxation > 0.0 && opts.relaxation < 2.0) {
        return Err(QpError::InvalidProblem("invalid solver options".into()));
    }
    if problem.num_vars() == 0 {
        return Ok(QpSolution {
            x: Vec::new(),
            duals: Vec::new(),
            objective_value: problem.constant(),
            status: Status::Optimal,
            kkt: KktResiduals::default(),
            iterations: 0,
            polished: false,
        });
    }
    let mut solution = admm::run(problem, opts)?;
    if opts.canonical && solution.status == Status::Optimal {
        if let Some(canonical) = polish::minimum_norm_face_point(problem, &solution, opts) {
            solution = canonical;
        }
    }
    Ok(solution)
}

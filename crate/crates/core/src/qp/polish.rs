use super::admm::run_from;
use super::kkt::residuals;
use super::ldl::{Ldl, SymAccumulator};
use super::{QpProblem, QpSolution, SolveOptions, Status, VarSpec};

const PRIMAL_REG: f64 = 1e-6;
const DUAL_REG: f64 = 1e-8;
const REFINE_STEPS: usize = 12;
const TIE_TOL: f64 = 1e-7;
const MAX_PASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum VarClass {
    Lower,
    Upper,
    Zero,
    /// Off every bound, with the sign used for the absolute-value term.
    Free(i8),
}

/// Guesses the active set from the unclamped proximal values.
pub(super) fn classify(vars: &[VarSpec], raw: &[f64]) -> Vec<VarClass> {
    vars.iter()
        .zip(raw)
        .map(|(v, &r)| {
            if v.lower == v.upper || r <= v.lower {
                VarClass::Lower
            } else if r >= v.upper {
                VarClass::Upper
            } else if r == 0.0 && v.abs > 0.0 {
                VarClass::Zero
            } else if r > 0.0 {
                VarClass::Free(1)
            } else if r < 0.0 {
                VarClass::Free(-1)
            } else {
                VarClass::Free(0)
            }
        })
        .collect()
}

/// Solves the equality-constrained problem left after fixing every variable
/// that is not `Free`, starting from the ADMM iterate `(x_hint, dual_hint)`.
/// When the result violates a bound, a sign or a multiplier sign, the guess
/// is corrected and the solve repeated a few times.
pub(super) fn polish(
    problem: &QpProblem,
    classes: &[VarClass],
    x_hint: &[f64],
    dual_hint: &[f64],
    tol: f64,
) -> Option<QpSolution> {
    let vars = problem.vars();
    let mut classes = classes.to_vec();
    let cols = problem.columns();
    let mut aty = vec![0.0; problem.num_vars()];
    for _ in 0..MAX_PASSES {
        let (x, duals) = reduced_solve(problem, &cols, &classes, x_hint, dual_hint)?;
        let mut changed = false;
        for (i, v) in vars.iter().enumerate() {
            let VarClass::Free(s) = classes[i] else {
                continue;
            };
            let xi = x[i];
            if xi < v.lower - tol {
                classes[i] = VarClass::Lower;
                changed = true;
            } else if xi > v.upper + tol {
                classes[i] = VarClass::Upper;
                changed = true;
            } else if v.abs > 0.0 && f64::from(s) * xi < -tol {
                classes[i] = if v.lower <= 0.0 && v.upper >= 0.0 {
                    VarClass::Zero
                } else {
                    VarClass::Lower
                };
                changed = true;
            }
        }
        if changed {
            continue;
        }
        let x: Vec<f64> = x.iter().zip(vars).map(|(xi, v)| xi.clamp(v.lower, v.upper)).collect();
        let kkt = residuals(problem, &x, &duals);
        if kkt.max() <= tol {
            return Some(QpSolution {
                objective_value: problem.objective(&x),
                x,
                duals,
                status: Status::Optimal,
                kkt,
                iterations: 0,
                polished: true,
            });
        }
        // Release fixed variables whose multiplier has the wrong sign.
        problem.mul_transpose(&duals, &mut aty);
        for (i, v) in vars.iter().enumerate() {
            let g = 2.0 * v.quad * x[i] + v.lin - aty[i];
            let f = v.abs;
            match classes[i] {
                VarClass::Lower if v.lower < v.upper => {
                    let up = g + if v.lower >= 0.0 { f } else { -f };
                    if up < -tol {
                        classes[i] = VarClass::Free(if v.lower >= 0.0 { 1 } else { -1 });
                        changed = true;
                    }
                }
                VarClass::Upper => {
                    let down = g + if v.upper > 0.0 { f } else { -f };
                    if down > tol {
                        classes[i] = VarClass::Free(if v.upper > 0.0 { 1 } else { -1 });
                        changed = true;
                    }
                }
                VarClass::Zero => {
                    if g + f < -tol {
                        classes[i] = VarClass::Free(1);
                        changed = true;
                    } else if g - f > tol {
                        classes[i] = VarClass::Free(-1);
                        changed = true;
                    }
                }
                _ => {}
            }
        }
        if !changed {
            return None;
        }
    }
    None
}

/// Reduced KKT solve for the given active-set guess. Returns the unclamped
/// primal point and the multipliers.
fn reduced_solve(
    problem: &QpProblem,
    cols: &[Vec<(usize, f64)>],
    classes: &[VarClass],
    x_hint: &[f64],
    dual_hint: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = problem.num_vars();
    let m = problem.num_rows();
    let vars = problem.vars();
    let mut x = vec![0.0; n];
    let mut lin = vec![0.0; n];
    let mut free = vec![false; n];
    for (i, (v, c)) in vars.iter().zip(classes).enumerate() {
        match *c {
            VarClass::Lower => x[i] = v.lower,
            VarClass::Upper => x[i] = v.upper,
            VarClass::Zero => x[i] = 0.0,
            VarClass::Free(s) => {
                free[i] = true;
                lin[i] = v.lin + v.abs * f64::from(s);
                x[i] = x_hint[i];
            }
        }
    }
    let diag: Vec<f64> = vars.iter().map(|v| 1.0 / (2.0 * v.quad + PRIMAL_REG)).collect();
    let mut acc = SymAccumulator::new(m);
    for i in (0..n).filter(|&i| free[i]) {
        acc.add_outer(&cols[i], diag[i]);
    }
    acc.add_diagonal(DUAL_REG);
    let ldl = Ldl::factor(acc);

    // Reduced system over free variables, with y = -λ:
    //   2Q x + Aᵀy = -l,   A x = d.
    let rhs1: Vec<f64> = (0..n).map(|i| if free[i] { -lin[i] } else { 0.0 }).collect();
    let rhs2 = problem.rhs();
    let mut y: Vec<f64> = dual_hint.iter().map(|v| -v).collect();
    let mut aty = vec![0.0; n];
    let mut ax = vec![0.0; m];
    let mut r1 = vec![0.0; n];
    let mut r2 = vec![0.0; m];
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; m];
    let mut scratch = Vec::new();
    let scale = 1.0 + rhs1.iter().chain(rhs2).fold(0.0f64, |a, b| a.max(b.abs()));
    for step in 0..=REFINE_STEPS {
        problem.mul_transpose(&y, &mut aty);
        for i in 0..n {
            r1[i] = if free[i] {
                rhs1[i] - 2.0 * vars[i].quad * x[i] - aty[i]
            } else {
                0.0
            };
        }
        problem.mul(&x, &mut ax);
        for r in 0..m {
            r2[r] = rhs2[r] - ax[r];
        }
        let res = r1.iter().chain(&r2).fold(0.0f64, |a, b| a.max(b.abs()));
        if res <= 1e-13 * scale || step == REFINE_STEPS {
            break;
        }
        regularized_solve(
            problem,
            cols,
            &free,
            &diag,
            &ldl,
            &r1,
            &r2,
            &mut dx,
            &mut dy,
            &mut scratch,
        );
        for i in 0..n {
            x[i] += dx[i];
        }
        for r in 0..m {
            y[r] += dy[r];
        }
    }
    if !x.iter().chain(&y).all(|v| v.is_finite()) {
        return None;
    }
    Some((x, y.iter().map(|v| -v).collect()))
}

/// One solve with the quasi-definite regularized system
/// `[H+δ Aᵀ; A -δ'] (dx, dy) = (r1, r2)` via its Schur complement.
#[allow(clippy::too_many_arguments)]
fn regularized_solve(
    problem: &QpProblem,
    cols: &[Vec<(usize, f64)>],
    free: &[bool],
    diag: &[f64],
    ldl: &Ldl,
    r1: &[f64],
    r2: &[f64],
    dx: &mut [f64],
    dy: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    // (A D Aᵀ + δ') dy = A D r1 - r2
    dy.iter_mut().zip(r2).for_each(|(d, r)| *d = -r);
    for (i, col) in cols.iter().enumerate() {
        if free[i] && r1[i] != 0.0 {
            let t = diag[i] * r1[i];
            for &(r, c) in col {
                dy[r] += c * t;
            }
        }
    }
    ldl.solve(dy, scratch);
    problem.mul_transpose(dy, dx);
    for i in 0..dx.len() {
        dx[i] = if free[i] { diag[i] * (r1[i] - dx[i]) } else { 0.0 };
    }
}

/// Re-solves over the optimal face identified by the duals of `sol` for
/// its minimum-norm point. `None` when the face is a single point or the
/// result cannot be certified optimal.
pub(super) fn minimum_norm_face_point(
    problem: &QpProblem,
    sol: &QpSolution,
    opts: &SolveOptions,
) -> Option<QpSolution> {
    let n = problem.num_vars();
    let mut aty = vec![0.0; n];
    problem.mul_transpose(&sol.duals, &mut aty);
    let mut face = QpProblem::new();
    let mut any_interval = false;
    for (i, v) in problem.vars().iter().enumerate() {
        let xi = sol.x[i];
        let (lo, hi) = if v.quad > 0.0 {
            (xi, xi)
        } else {
            let r = v.lin - aty[i];
            let tie = TIE_TOL * (1.0 + v.lin.abs().max(aty[i].abs()));
            let (lo, hi) = minimizing_interval(r, v.abs, v.lower, v.upper, tie);
            if lo == f64::INFINITY || hi == f64::NEG_INFINITY || xi < lo - opts.tol || xi > hi + opts.tol {
                return None;
            }
            (lo.min(xi), hi.max(xi))
        };
        any_interval |= hi > lo;
        face.add_var(VarSpec::free().quad(0.5).bounds(lo, hi));
    }
    if !any_interval {
        return None;
    }
    for r in 0..problem.num_rows() {
        face.add_equality(problem.row(r).iter().copied(), problem.rhs()[r]);
    }
    let face_opts = SolveOptions {
        canonical: false,
        ..*opts
    };
    let face_sol = run_from(&face, &face_opts, Some(&sol.x)).ok()?;
    let x = face_sol.x;
    let kkt = residuals(problem, &x, &sol.duals);
    (kkt.max() <= opts.tol).then(|| QpSolution {
        objective_value: problem.objective(&x),
        x,
        duals: sol.duals.clone(),
        status: Status::Optimal,
        kkt,
        iterations: sol.iterations + face_sol.iterations,
        polished: sol.polished,
    })
}

/// Minimizers of `r·x + f·|x|` over `[lower, upper]`, with slopes below
/// `tie` treated as flat.
pub(crate) fn minimizing_interval(r: f64, f: f64, lower: f64, upper: f64, tie: f64) -> (f64, f64) {
    let flat = |s: f64| if s.abs() <= tie { 0.0 } else { s };
    let left = flat(r - f);
    let right = flat(r + f);
    let (a, b) = if right < 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else if left > 0.0 {
        (f64::NEG_INFINITY, f64::NEG_INFINITY)
    } else {
        (
            if left == 0.0 { f64::NEG_INFINITY } else { 0.0 },
            if right == 0.0 { f64::INFINITY } else { 0.0 },
        )
    };
    if b < lower {
        (lower, lower)
    } else if a > upper {
        (upper, upper)
    } else {
        (a.max(lower), b.min(upper))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_of_linear_pieces() {
        assert_eq!(minimizing_interval(1.0, 0.0, -2.0, 3.0, 1e-9), (-2.0, -2.0));
        assert_eq!(minimizing_interval(-1.0, 0.0, -2.0, 3.0, 1e-9), (3.0, 3.0));
        assert_eq!(minimizing_interval(0.0, 0.0, -2.0, 3.0, 1e-9), (-2.0, 3.0));
        assert_eq!(minimizing_interval(0.5, 1.0, -2.0, 3.0, 1e-9), (0.0, 0.0));
        assert_eq!(minimizing_interval(1.0, 1.0, -2.0, 3.0, 1e-9), (-2.0, 0.0));
        assert_eq!(minimizing_interval(0.5, 1.0, 2.0, 3.0, 1e-9), (2.0, 2.0));
    }
}

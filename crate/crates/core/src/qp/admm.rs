use super::kkt::residuals;
use super::ldl::{Ldl, SymAccumulator};
use super::polish::{self, VarClass};
use super::{QpError, QpProblem, QpSolution, SolveOptions, Status, VarSpec};

const CHECK_EVERY: usize = 10;
const ADAPT_EVERY: usize = 20;
const UNPOLISHED_MARGIN: f64 = 1e-2;

/// Euclidean projection onto `{x : A x = d}`.
pub(super) struct AffineProjector<'a> {
    problem: &'a QpProblem,
    ldl: Option<Ldl>,
    row_buf: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> AffineProjector<'a> {
    pub fn new(problem: &'a QpProblem) -> Self {
        let m = problem.num_rows();
        let ldl = (m > 0).then(|| {
            let mut acc = SymAccumulator::new(m);
            for col in problem.columns() {
                acc.add_outer(&col, 1.0);
            }
            Ldl::factor(acc)
        });
        Self {
            problem,
            ldl,
            row_buf: vec![0.0; m],
            scratch: Vec::new(),
        }
    }

    /// Least-squares multipliers `y = (AAᵀ)⁺ A v`.
    pub fn range_coefficients(&mut self, v: &[f64], out: &mut [f64]) {
        self.problem.mul(v, out);
        if let Some(ldl) = &self.ldl {
            ldl.solve(out, &mut self.scratch);
        }
    }

    pub fn project(&mut self, v: &[f64], out: &mut [f64]) {
        let Some(ldl) = &self.ldl else {
            out.copy_from_slice(v);
            return;
        };
        self.problem.mul(v, &mut self.row_buf);
        for (r, d) in self.row_buf.iter_mut().zip(self.problem.rhs()) {
            *r -= d;
        }
        ldl.solve(&mut self.row_buf, &mut self.scratch);
        self.problem.mul_transpose(&self.row_buf, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = vi - *o;
        }
    }
}

/// Closed-form minimizer of `q x² + l x + f|x| + ρ/2 (x - v)²` over the box.
/// Also returns the unclamped value.
#[inline]
pub(super) fn prox(spec: &VarSpec, v: f64, rho: f64) -> (f64, f64) {
    let t = rho * v - spec.lin;
    let mag = (t.abs() - spec.abs).max(0.0);
    let raw = if mag == 0.0 {
        0.0
    } else {
        mag.copysign(t) / (2.0 * spec.quad + rho)
    };
    (raw.clamp(spec.lower, spec.upper), raw)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(super) fn run(problem: &QpProblem, opts: &SolveOptions) -> Result<QpSolution, QpError> {
    run_from(problem, opts, None)
}

pub(super) fn run_from(problem: &QpProblem, opts: &SolveOptions, start: Option<&[f64]>) -> Result<QpSolution, QpError> {
    let n = problem.num_vars();
    let m = problem.num_rows();
    let vars = problem.vars();
    let mut proj = AffineProjector::new(problem);

    let zeros = vec![0.0; n];
    let mut z = vec![0.0; n];
    proj.project(&zeros, &mut z);
    let mut az = vec![0.0; m];
    problem.mul(&z, &mut az);
    let d_scale = 1.0 + inf_norm(problem.rhs());
    let inconsistency = az
        .iter()
        .zip(problem.rhs())
        .fold(0.0f64, |acc, (a, d)| acc.max((a - d).abs()));
    if inconsistency > 1e-9 * d_scale {
        return Err(QpError::Infeasible(format!(
            "equality constraints are inconsistent (residual {inconsistency:.3e})"
        )));
    }

    let start_point: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => vars.iter().map(|v| 0.0f64.clamp(v.lower, v.upper)).collect(),
    };
    proj.project(&start_point, &mut z);

    let mut rho = opts.rho;
    let alpha = opts.relaxation;
    let mut x = vec![0.0; n];
    let mut raw = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z_new = vec![0.0; n];
    let mut scaled = vec![0.0; n];
    let mut duals = vec![0.0; m];
    let mut last_classes: Option<Vec<VarClass>> = None;
    let mut since_adapt = 0;
    let mut fallback = None;

    for iter in 1..=opts.max_iter {
        for i in 0..n {
            let (xi, ri) = prox(&vars[i], z[i] - u[i], rho);
            x[i] = xi;
            raw[i] = ri;
        }
        for i in 0..n {
            w[i] = alpha * x[i] + (1.0 - alpha) * z[i] + u[i];
        }
        proj.project(&w, &mut z_new);
        let mut dz = 0.0f64;
        for i in 0..n {
            let xh = alpha * x[i] + (1.0 - alpha) * z[i];
            u[i] += xh - z_new[i];
            dz = dz.max((z_new[i] - z[i]).abs());
        }
        std::mem::swap(&mut z, &mut z_new);
        since_adapt += 1;

        if iter % CHECK_EVERY != 0 && iter != opts.max_iter {
            continue;
        }

        // λ = -(AAᵀ)⁺ A (ρu)
        for i in 0..n {
            scaled[i] = -rho * u[i];
        }
        proj.range_coefficients(&scaled, &mut duals);

        if opts.polish {
            let classes = polish::classify(vars, &raw);
            if last_classes.as_ref() != Some(&classes) {
                if let Some(sol) = polish::polish(problem, &classes, &x, &duals, opts.tol) {
                    return Ok(QpSolution {
                        iterations: iter,
                        ..sol
                    });
                }
                last_classes = Some(classes);
            }
        }

        let kkt = residuals(problem, &x, &duals);
        if kkt.max() <= opts.tol {
            let sol = QpSolution {
                objective_value: problem.objective(&x),
                x: x.clone(),
                duals: duals.clone(),
                status: Status::Optimal,
                kkt,
                iterations: iter,
                polished: false,
            };
            // Row residuals add up in derived balances, so an unpolished
            // point is only taken early once it is well inside `tol`.
            if !opts.polish || kkt.max() <= UNPOLISHED_MARGIN * opts.tol {
                return Ok(sol);
            }
            fallback = Some(sol);
        }

        let r_prim = x.iter().zip(&z).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        if r_prim > opts.tol {
            let gap: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
            if let Some(msg) = separation_certificate(problem, &mut proj, &gap) {
                return Err(QpError::Infeasible(msg));
            }
        }

        if opts.adaptive_rho && since_adapt >= ADAPT_EVERY {
            let r_dual = rho * dz;
            let factor = if r_prim > 10.0 * r_dual {
                2.0
            } else if r_dual > 10.0 * r_prim {
                0.5
            } else {
                1.0
            };
            let new_rho = (rho * factor).clamp(1e-6, 1e6);
            if new_rho != rho {
                let k = rho / new_rho;
                u.iter_mut().for_each(|ui| *ui *= k);
                rho = new_rho;
                since_adapt = 0;
            }
        }
    }

    if let Some(sol) = fallback {
        return Ok(sol);
    }
    let kkt = residuals(problem, &x, &duals);
    Err(QpError::MaxIterExceeded(Box::new(QpSolution {
        objective_value: problem.objective(&x),
        x,
        duals,
        status: Status::MaxIter,
        kkt,
        iterations: opts.max_iter,
        polished: false,
    })))
}

/// Looks for a hyperplane `cᵀx = wᵀd`, `c = Aᵀw`, that strictly separates
/// the box from the affine set, using the persistent gap between them.
fn separation_certificate(problem: &QpProblem, proj: &mut AffineProjector<'_>, gap: &[f64]) -> Option<String> {
    let m = problem.num_rows();
    if m == 0 {
        return None;
    }
    let mut wv = vec![0.0; m];
    proj.range_coefficients(gap, &mut wv);
    let mut c = vec![0.0; problem.num_vars()];
    problem.mul_transpose(&wv, &mut c);
    let c_norm = inf_norm(&c);
    if c_norm == 0.0 || !c_norm.is_finite() {
        return None;
    }
    let level: f64 = wv.iter().zip(problem.rhs()).map(|(a, b)| a * b).sum::<f64>() / c_norm;
    let (mut sup, mut inf) = (0.0f64, 0.0f64);
    let mut magnitude = level.abs();
    for (ci, v) in c.iter().zip(problem.vars()) {
        let ci = ci / c_norm;
        if ci.abs() <= 1e-12 {
            continue;
        }
        let (hi, lo) = if ci > 0.0 {
            (v.upper, v.lower)
        } else {
            (v.lower, v.upper)
        };
        sup += ci * hi;
        inf += ci * lo;
        magnitude += (ci * v.lower).abs().min((ci * v.upper).abs()).min(1e300);
    }
    let margin = 1e-8 * (1.0 + magnitude);
    if sup.is_finite() && sup < level - margin {
        return Some(format!(
            "box bounds cannot reach the equality constraints (gap {:.3e})",
            level - sup
        ));
    }
    if inf.is_finite() && inf > level + margin {
        return Some(format!(
            "box bounds cannot reach the equality constraints (gap {:.3e})",
            inf - level
        ));
    }
    None
}

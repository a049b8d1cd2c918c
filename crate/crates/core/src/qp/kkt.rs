use serde::{Deserialize, Serialize};

use super::{QpError, QpProblem};

/// Max-norm KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// Equality and box violation.
    pub primal_eq: f64,
    /// Reduced gradient in directions with no finite bound to absorb it.
    pub stationarity: f64,
    /// Reduced gradient that a finite bound could absorb, weighted by the
    /// distance to that bound.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal_eq.max(self.stationarity).max(self.complementarity)
    }
}

/// Residuals of `(x, duals)` for `problem`, using `∇f(x) = Aᵀλ`.
pub fn check_kkt(problem: &QpProblem, x: &[f64], duals: &[f64]) -> Result<KktResiduals, QpError> {
    if x.len() != problem.num_vars() {
        return Err(QpError::DimensionMismatch {
            expected: problem.num_vars(),
            got: x.len(),
        });
    }
    if duals.len() != problem.num_rows() {
        return Err(QpError::DimensionMismatch {
            expected: problem.num_rows(),
            got: duals.len(),
        });
    }
    Ok(residuals(problem, x, duals))
}

pub(super) fn residuals(problem: &QpProblem, x: &[f64], duals: &[f64]) -> KktResiduals {
    let mut out = KktResiduals::default();
    let mut ax = vec![0.0; problem.num_rows()];
    problem.mul(x, &mut ax);
    for (axr, dr) in ax.iter().zip(problem.rhs()) {
        out.primal_eq = out.primal_eq.max((axr - dr).abs());
    }
    let mut aty = vec![0.0; problem.num_vars()];
    problem.mul_transpose(duals, &mut aty);
    for ((v, &xi), &ai) in problem.vars().iter().zip(x).zip(&aty) {
        out.primal_eq = out.primal_eq.max(v.lower - xi).max(xi - v.upper);
        let g = 2.0 * v.quad * xi + v.lin - ai;
        let gap_lo = xi - v.lower;
        let gap_hi = v.upper - xi;
        let (stat, comp) = if v.abs == 0.0 {
            reduced(g, gap_lo, gap_hi)
        } else {
            // Either on a smooth side of the kink, or at the kink with |x|
            // counted as the error.
            let kink_r = g - g.clamp(-v.abs, v.abs);
            let (ks, kc) = reduced(kink_r, gap_lo, gap_hi);
            let kink = (ks, kc.max(xi.abs()));
            if xi == 0.0 {
                kink
            } else {
                let side = reduced(g + v.abs * sign(xi), gap_lo, gap_hi);
                if side.0.max(side.1) <= kink.0.max(kink.1) {
                    side
                } else {
                    kink
                }
            }
        };
        out.stationarity = out.stationarity.max(stat);
        out.complementarity = out.complementarity.max(comp);
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Splits a reduced gradient `r` into (stationarity, complementarity) parts.
/// `r > 0` has to be held by the lower bound, `r < 0` by the upper bound.
fn reduced(r: f64, gap_lo: f64, gap_hi: f64) -> (f64, f64) {
    let gap = if r > 0.0 {
        gap_lo
    } else if r < 0.0 {
        gap_hi
    } else {
        return (0.0, 0.0);
    };
    if gap.is_infinite() {
        (r.abs(), 0.0)
    } else {
        (0.0, r.abs().min(gap.max(0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::super::VarSpec;
    use super::*;

    fn bilateral() -> QpProblem {
        let mut p = QpProblem::new();
        let x = p.add_var(VarSpec::free().quad(0.5));
        let y = p.add_var(VarSpec::free().quad(0.5).lin(10.0));
        p.add_equality([(x, 1.0), (y, 1.0)], 0.0);
        p
    }

    #[test]
    fn exact_point_has_zero_residual() {
        let r = check_kkt(&bilateral(), &[5.0, -5.0], &[5.0]).unwrap();
        assert!(r.max() <= 1e-12, "{r:?}");
    }

    #[test]
    fn perturbed_point_reports_equality_violation() {
        let r = check_kkt(&bilateral(), &[5.1, -5.0], &[5.0]).unwrap();
        assert!((r.primal_eq - 0.1).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn empty_problem() {
        assert_eq!(check_kkt(&QpProblem::new(), &[], &[]).unwrap().max(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            check_kkt(&bilateral(), &[1.0], &[0.0]),
            Err(QpError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn active_bound_absorbs_gradient() {
        let mut p = QpProblem::new();
        p.add_var(VarSpec::free().lin(1.0).bounds(2.0, 3.0));
        assert_eq!(check_kkt(&p, &[2.0], &[]).unwrap().max(), 0.0);
        let r = check_kkt(&p, &[2.5], &[]).unwrap();
        assert!((r.complementarity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kink_subgradient() {
        let mut p = QpProblem::new();
        p.add_var(VarSpec::free().lin(0.5).abs(2.0));
        assert_eq!(check_kkt(&p, &[0.0], &[]).unwrap().max(), 0.0);
        assert!(check_kkt(&p, &[1.0], &[]).unwrap().max() >= 1.0);
    }
}

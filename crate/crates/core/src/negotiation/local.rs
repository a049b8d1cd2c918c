//! Closed-form local subproblems.
//!
//! An agent owns one injection `y` with its own cost and bounds, and a few
//! exchanged quantities `x_j` tied to it by `y = Σ c_j·x_j`. Each `x_j` has a
//! separable cost and is pulled toward a consensus target by `ρ/2·(x − v)²`.
//! For a multiplier `t` on the tie, every `x_j` has a closed-form minimizer,
//! so the subproblem reduces to a monotone scalar equation in `t`.

use crate::qp::{minimizing_interval, VarSpec};

pub(super) struct Term {
    pub spec: VarSpec,
    pub coef: f64,
    pub target: f64,
}

fn soft(v: f64, f: f64) -> f64 {
    v.signum() * (v.abs() - f).max(0.0)
}

/// Minimizer of `spec(x) + t·c·x + ρ/2·(x − target)²`, with `ρ > 0`.
fn term_argmin(term: &Term, t: f64, rho: f64) -> f64 {
    let s = &term.spec;
    let lin = s.lin + t * term.coef - rho * term.target;
    (soft(-lin, s.abs) / (2.0 * s.quad + rho)).clamp(s.lower, s.upper)
}

/// Minimizers of `own(y) − t·y`.
fn own_argmin(own: &VarSpec, t: f64) -> (f64, f64) {
    if own.quad > 0.0 {
        let y = (soft(t - own.lin, own.abs) / (2.0 * own.quad)).clamp(own.lower, own.upper);
        (y, y)
    } else {
        minimizing_interval(own.lin - t, own.abs, own.lower, own.upper, 0.0)
    }
}

/// Solves the subproblem, writing the `x_j` to `out`. Returns the injection
/// and the multiplier of the tie, or `None` when no bounded multiplier
/// exists (the own bounds cannot be met).
pub(super) fn solve(own: &VarSpec, terms: &[Term], rho: f64, warm: f64, out: &mut [f64]) -> Option<(f64, f64)> {
    let supply = |t: f64| {
        terms
            .iter()
            .map(|term| term.coef * term_argmin(term, t, rho))
            .sum::<f64>()
    };
    // +1: raise t, -1: lower t, 0: t is a solution.
    let side = |t: f64| {
        let s = supply(t);
        let (lo, hi) = own_argmin(own, t);
        if s > hi {
            1
        } else if s < lo {
            -1
        } else {
            0
        }
    };
    let t = locate(side, warm)?;
    let mut y = 0.0;
    for (o, term) in out.iter_mut().zip(terms) {
        *o = term_argmin(term, t, rho);
        y += term.coef * *o;
    }
    Some((y, t))
}

fn locate(side: impl Fn(f64) -> i32, warm: f64) -> Option<f64> {
    let first = side(warm);
    if first == 0 {
        return Some(warm);
    }
    let dir = f64::from(first);
    let (mut lo, mut hi) = (warm, warm);
    let mut step = 1.0;
    loop {
        let probe = warm + dir * step;
        match side(probe) {
            0 => return Some(probe),
            s if s == first => {
                if dir > 0.0 {
                    lo = probe
                } else {
                    hi = probe
                }
            }
            _ => {
                if dir > 0.0 {
                    hi = probe
                } else {
                    lo = probe
                }
                break;
            }
        }
        step *= 2.0;
        if step > 1e30 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match side(mid) {
            0 => return Some(mid),
            1 => lo = mid,
            _ => hi = mid,
        }
    }
    Some(0.5 * (lo + hi))
}

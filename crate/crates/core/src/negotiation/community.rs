use crate::clearing::community::{community_index, community_problem, community_result, CommunityBlock};
use crate::clearing::ClearingResult;
use crate::model::{CommunitySpec, MarketInstance};
use crate::qp::{self, check_kkt, minimizing_interval, QpProblem, QpSolution, SolveOptions, Status, VarSpec};

use super::local::{self, Term};
use super::{
    balance_rho, publish_tolerance, settled, tie_tolerance, NegotiationConfig, NegotiationError, NegotiationTrace,
    TraceRound, ADAPT_EVERY, MAX_RHO_CHANGES, SETTLE_MARGIN,
};

/// Per member: `[q, α, β]`, entering `p = −q − α + β`.
const COEFS: [f64; 3] = [-1.0, -1.0, 1.0];

#[derive(Clone)]
struct State {
    x: Vec<[f64; 3]>,
    u: Vec<[f64; 3]>,
    /// The manager's copies, which satisfy the pool and aggregate rows.
    z: Vec<[f64; 3]>,
    p: Vec<f64>,
    t: Vec<f64>,
    rho: f64,
}

impl State {
    fn new(n: usize, t: Vec<f64>, rho: f64) -> Self {
        Self {
            x: vec![[0.0; 3]; n],
            u: vec![[0.0; 3]; n],
            z: vec![[0.0; 3]; n],
            p: vec![0.0; n],
            t,
            rho,
        }
    }

    /// Pool, import and export prices `−ρ·ū`.
    fn prices(&self) -> [f64; 3] {
        let n = self.u.len() as f64;
        let mut out = [0.0; 3];
        for u in &self.u {
            for j in 0..3 {
                out[j] -= self.rho * u[j] / n;
            }
        }
        out
    }
}

/// Objective terms of one stage.
struct Stage {
    own: Vec<VarSpec>,
    member: Vec<[VarSpec; 3]>,
    import: VarSpec,
    export: VarSpec,
}

struct Pool<'a> {
    ids: &'a [String],
    problem: QpProblem,
    block: CommunityBlock,
}

impl Pool<'_> {
    fn point(&self, state: &State) -> Vec<f64> {
        let mut x = vec![0.0; self.problem.num_vars()];
        for ((m, v), &p) in self.block.members.iter().zip(&state.x).zip(&state.p) {
            x[m.p] = p;
            x[m.q] = v[0];
            x[m.alpha] = v[1];
            x[m.beta] = v[2];
            x[self.block.q_imp] += v[1];
            x[self.block.q_exp] += v[2];
        }
        x
    }

    fn duals(&self, state: &State) -> Vec<f64> {
        let mut duals = vec![0.0; self.problem.num_rows()];
        for (m, &t) in self.block.members.iter().zip(&state.t) {
            duals[m.row] = t;
        }
        let [pool, imp, exp] = state.prices();
        duals[self.block.pool_row] = pool;
        duals[self.block.imp_row] = imp;
        duals[self.block.exp_row] = exp;
        duals
    }
}

/// Manager's choice of an aggregate `Q` with cost `spec`, given the sum `w`
/// of the members' proposals.
fn aggregate(spec: &VarSpec, w: f64, n: f64, rho: f64) -> f64 {
    let lin = spec.lin - rho * w / n;
    let v = -lin;
    let shrunk = v.signum() * (v.abs() - spec.abs).max(0.0);
    (shrunk / (2.0 * spec.quad + rho / n)).clamp(spec.lower, spec.upper)
}

fn run_stage(
    pool: &Pool,
    stage: &Stage,
    state: &mut State,
    cfg: &NegotiationConfig,
    first_round: usize,
    rounds: &mut Vec<TraceRound>,
    accept: &dyn Fn(&State) -> bool,
) -> Result<bool, NegotiationError> {
    let n = state.x.len();
    let nf = n as f64;
    let mut sent = vec![3; n];
    sent.push(3 * n);
    let messages = 6 * n;
    let mut best: Option<(f64, State)> = None;
    let mut out = [0.0; 3];
    let mut rho_changes = 0;
    for round in 0..cfg.max_rounds {
        for i in 0..n {
            let terms: Vec<Term> = (0..3)
                .map(|j| Term {
                    spec: stage.member[i][j],
                    coef: COEFS[j],
                    target: state.z[i][j] - state.u[i][j],
                })
                .collect();
            let (p, t) = local::solve(&stage.own[i], &terms, state.rho, state.t[i], &mut out)
                .ok_or_else(|| NegotiationError::Infeasible(pool.ids[i].clone()))?;
            state.x[i] = out;
            state.p[i] = p;
            state.t[i] = t;
        }
        // Manager: project the proposals onto the pool and aggregate rows.
        let w: Vec<[f64; 3]> = (0..n)
            .map(|i| [0, 1, 2].map(|j| state.x[i][j] + state.u[i][j]))
            .collect();
        let sum = |j: usize| w.iter().map(|v| v[j]).sum::<f64>();
        let shift = [
            -sum(0) / nf,
            (aggregate(&stage.import, sum(1), nf, state.rho) - sum(1)) / nf,
            (aggregate(&stage.export, sum(2), nf, state.rho) - sum(2)) / nf,
        ];
        let mut primal = 0.0f64;
        let mut change = 0.0f64;
        for i in 0..n {
            for j in 0..3 {
                let z = w[i][j] + shift[j];
                change = change.max((z - state.z[i][j]).abs());
                state.z[i][j] = z;
                let gap = state.x[i][j] - z;
                state.u[i][j] += gap;
                primal = primal.max(gap.abs());
            }
        }
        let dual = state.rho * change;
        rounds.push(TraceRound {
            round: first_round + round + 1,
            primal_residual: primal,
            dual_residual: dual,
            objective: pool.problem.objective(&pool.point(state)),
            messages,
            rho: state.rho,
            sent: sent.clone(),
            received: sent.clone(),
        });
        let score = (primal / cfg.tol_primal).max(dual / cfg.tol_dual);
        if score <= 1.0 && accept(state) {
            return Ok(true);
        }
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, state.clone()));
        }
        if cfg.adaptive_rho && rho_changes < MAX_RHO_CHANGES && (round + 1) % ADAPT_EVERY == 0 {
            let f = balance_rho(primal, dual, state.rho, cfg.rho);
            if f != 1.0 {
                rho_changes += 1;
                state.rho *= f;
                for u in &mut state.u {
                    u.iter_mut().for_each(|v| *v /= f);
                }
            }
        }
    }
    if let Some((_, s)) = best {
        *state = s;
    }
    Ok(false)
}

/// Negotiates one community: members propose their pool trade, import and
/// export shares; the manager returns copies that balance the pool and
/// prices the aggregates against the community's external cost.
pub fn negotiate_community(
    instance: &MarketInstance,
    community: &CommunitySpec,
    cfg: &NegotiationConfig,
) -> Result<(ClearingResult, NegotiationTrace), NegotiationError> {
    cfg.validate()?;
    let k = community_index(instance, community)?;
    let (problem, block) = community_problem(instance, k);
    let ids: Vec<String> = block.members.iter().map(|m| instance.peer(m.peer).id.clone()).collect();
    let mut trace = NegotiationTrace {
        agents: ids.iter().cloned().chain([community.id.clone()]).collect(),
        ..Default::default()
    };
    if block.members.len() == 1 {
        // A lone member faces the external cost directly; nothing to agree on.
        let sol = qp::solve(&problem, &SolveOptions::default()).map_err(crate::clearing::ClearingError::from)?;
        trace.converged = true;
        trace.rounds.push(TraceRound {
            round: 1,
            primal_residual: 0.0,
            dual_residual: 0.0,
            objective: sol.objective_value,
            messages: 0,
            rho: cfg.rho,
            sent: vec![0, 0],
            received: vec![0, 0],
        });
        let (result, _) = community_result(instance, &block, &sol);
        return Ok((result, trace));
    }

    let pool = Pool {
        ids: &ids,
        problem,
        block,
    };
    let g = instance.external_cost(k);
    let nonneg = |spec: VarSpec| spec.bounds(0.0, f64::INFINITY);
    let stage = Stage {
        own: pool.block.members.iter().map(|m| *pool.problem.var(m.p)).collect(),
        member: pool
            .block
            .members
            .iter()
            .map(|_| {
                [
                    VarSpec::free().abs(community.internal_fee),
                    nonneg(VarSpec::free().lin(community.import_weight)),
                    nonneg(VarSpec::free().lin(community.export_weight)),
                ]
            })
            .collect(),
        import: nonneg(VarSpec::free().quad(g.import_quadratic).lin(g.import_linear)),
        export: nonneg(VarSpec::free().quad(g.export_quadratic).lin(g.export_linear)),
    };
    let t0 = stage.own.iter().map(|s| s.lin).collect();
    let mut state = State::new(ids.len(), t0, cfg.rho);
    let limit = publish_tolerance(cfg);
    let published = |s: &State| {
        check_kkt(&pool.problem, &pool.point(s), &pool.duals(s))
            .expect("dimensions match")
            .max()
            <= SETTLE_MARGIN * limit
    };
    trace.converged = run_stage(&pool, &stage, &mut state, cfg, 0, &mut trace.rounds, &published)?;

    let problem = &pool.problem;
    let duals = pool.duals(&state);
    let mut x = pool.point(&state);
    let mut kkt = check_kkt(problem, &x, &duals).expect("dimensions match");
    if trace.converged && cfg.tie_break {
        if let Some(y) = tie_break(&pool, &stage, &state, &x, cfg, &mut trace) {
            let k = check_kkt(problem, &y, &duals).expect("dimensions match");
            if k.max() <= limit {
                (x, kkt) = (y, k);
                trace.tie_break_applied = true;
            }
        }
    }
    let sol = QpSolution {
        objective_value: problem.objective(&x),
        status: if trace.converged {
            Status::Optimal
        } else {
            Status::MaxIter
        },
        kkt,
        iterations: trace.total_rounds(),
        polished: false,
        x,
        duals,
    };
    let (result, _) = community_result(instance, &pool.block, &sol);
    if !trace.converged {
        return Err(NegotiationError::MaxRoundsExceeded {
            result: Box::new(result),
            trace: Box::new(trace),
        });
    }
    Ok((result, trace))
}

/// Interval of values of a variable that stay optimal at reduced cost `r`,
/// widened to contain the current value.
fn face(spec: &VarSpec, r: f64, scale: f64, value: f64) -> VarSpec {
    let (lo, hi) = if spec.quad > 0.0 {
        (value, value)
    } else {
        minimizing_interval(r, spec.abs, spec.lower, spec.upper, tie_tolerance(scale))
    };
    VarSpec::free().quad(0.5).bounds(lo.min(value), hi.max(value))
}

fn tie_break(
    pool: &Pool,
    stage: &Stage,
    state: &State,
    x: &[f64],
    cfg: &NegotiationConfig,
    trace: &mut NegotiationTrace,
) -> Option<Vec<f64>> {
    let [pool_price, imp, exp] = state.prices();
    let members = &pool.block.members;
    let own = members
        .iter()
        .zip(&stage.own)
        .zip(&state.t)
        .map(|((m, spec), &t)| face(spec, spec.lin - t, t, x[m.p]))
        .collect();
    let member = members
        .iter()
        .zip(&stage.member)
        .zip(&state.t)
        .map(|((m, [q, a, b]), &t)| {
            [
                face(q, -(t + pool_price), t.abs().max(pool_price.abs()), x[m.q]),
                face(a, a.lin - (t + imp), t.abs().max(imp.abs()), x[m.alpha]),
                face(b, b.lin - (-t + exp), t.abs().max(exp.abs()), x[m.beta]),
            ]
        })
        .collect();
    let import = face(&stage.import, stage.import.lin + imp, imp, x[pool.block.q_imp]);
    let export = face(&stage.export, stage.export.lin + exp, exp, x[pool.block.q_exp]);
    let faces = Stage {
        own,
        member,
        import,
        export,
    };
    let mut second = State::new(members.len(), vec![0.0; members.len()], cfg.rho);
    second.z = state.x.clone();
    second.x = state.x.clone();
    let limit = publish_tolerance(cfg);
    let duals = pool.duals(state);
    let balanced = |s: &State| {
        check_kkt(&pool.problem, &pool.point(s), &duals)
            .expect("dimensions match")
            .primal_eq
            <= limit
    };
    let tight = settled(cfg);
    let first_round = trace.rounds.len();
    let agreed = run_stage(
        pool,
        &faces,
        &mut second,
        &tight,
        first_round,
        &mut trace.tie_break_rounds,
        &balanced,
    )
    .ok()?;
    agreed.then(|| pool.point(&second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::clear_community;
    use crate::clearing::fixtures::*;
    use crate::model::*;

    fn pair_community(fee: f64) -> (MarketInstance, CommunitySpec) {
        let mut spec = community("c1", &["g1", "c1"]);
        spec.internal_fee = fee;
        spec.external_cost = Some(ExternalCost {
            import_quadratic: 0.0,
            import_linear: 1000.0,
            export_quadratic: 0.0,
            export_linear: 1000.0,
        });
        let inst = build_instance(InstanceConfig {
            design: Design::Community,
            grid: None,
            peers: vec![
                in_community(producer("g1", 0.0, 10.0, 0.5, 0.0), "c1"),
                in_community(consumer("c1", -10.0, 0.5, 10.0), "c1"),
            ],
            communities: vec![spec.clone()],
            transaction_costs: TransactionCostSpec::default(),
            partners: None,
        })
        .unwrap();
        (inst, spec)
    }

    #[test]
    fn two_member_pool_matches_central_clearing() {
        let (inst, spec) = pair_community(0.0);
        let central = clear_community(&inst, &spec, &SolveOptions::default()).unwrap();
        let (r, _) = negotiate_community(&inst, &spec, &NegotiationConfig::default()).unwrap();
        let gap = (r.social_welfare - central.social_welfare).abs() / central.social_welfare.abs();
        assert!(gap <= 1e-4, "{} vs {}", r.social_welfare, central.social_welfare);
        let d = &r.community_decisions[0];
        assert!(
            (d.members[0].q + 5.0).abs() <= 1e-3 && (d.members[1].q - 5.0).abs() <= 1e-3,
            "{d:?}"
        );
    }

    #[test]
    fn lone_member_needs_no_negotiation() {
        let mut wind = producer("w", 3.0, 3.0, 0.0, 0.0);
        wind.must_take = true;
        let spec = community("solo", &["w"]);
        let inst = build_instance(InstanceConfig {
            design: Design::Community,
            grid: Some(GridTerms {
                price: 30.0,
                tariff: 10.0,
            }),
            peers: vec![grid("grid"), in_community(wind, "solo")],
            communities: vec![spec.clone()],
            transaction_costs: TransactionCostSpec::default(),
            partners: None,
        })
        .unwrap();
        let (r, trace) = negotiate_community(&inst, &spec, &NegotiationConfig::default()).unwrap();
        assert!(trace.rounds.len() <= 5);
        assert!((r.social_welfare - 60.0).abs() <= 1e-6);
    }

    #[test]
    fn trace_carries_no_cost_coefficients() {
        let (inst, spec) = pair_community(0.0);
        let inst = inst
            .modified(|c| {
                c.peers[0].cost = QuadraticCost::new(0.4837261, 1.9283746, 0.0);
                c.peers[1].cost = QuadraticCost::new(0.5172635, 11.3847561, 0.0);
            })
            .unwrap();
        let (_, trace) = negotiate_community(&inst, &spec, &NegotiationConfig::default()).unwrap();
        let text = serde_json::to_string(&trace).unwrap() + &trace.to_csv();
        for needle in ["4837261", "9283746", "5172635", "3847561"] {
            assert!(!text.contains(needle));
        }
    }
}

use crate::clearing::full_p2p::{assemble, build, pair_fee, Layout};
use crate::clearing::ClearingResult;
use crate::model::MarketInstance;
use crate::qp::{check_kkt, minimizing_interval, QpSolution, Status, VarSpec};

use super::local::{self, Term};
use super::{
    balance_rho, publish_tolerance, settled, tie_tolerance, NegotiationConfig, NegotiationError, NegotiationTrace,
    TraceRound, ADAPT_EVERY, MAX_RHO_CHANGES, SETTLE_MARGIN,
};

/// Peer `owner`'s side of pair `pair`; `dir` is +1 when the owner is the
/// pair's first peer.
struct Edge {
    owner: usize,
    pair: usize,
    dir: f64,
}

#[derive(Clone)]
struct State {
    p: Vec<f64>,
    u: Vec<f64>,
    /// Agreed trade per pair, oriented from the pair's first peer.
    z: Vec<f64>,
    /// Local multipliers (marginal values of own injection).
    t: Vec<f64>,
    rho: f64,
}

impl State {
    fn symmetric(&self, sides: &[(usize, usize)]) -> Vec<f64> {
        sides.iter().map(|&(a, b)| 0.5 * (self.p[a] - self.p[b])).collect()
    }

    /// Agreed prices `−ρ·u`, averaged over the two sides.
    fn prices(&self, sides: &[(usize, usize)]) -> Vec<f64> {
        sides
            .iter()
            .map(|&(a, b)| -0.5 * self.rho * (self.u[a] + self.u[b]))
            .collect()
    }
}

struct Network<'a> {
    instance: &'a MarketInstance,
    layout: Layout,
    edges: Vec<Edge>,
    by_peer: Vec<Vec<usize>>,
    /// Edge indices (first peer's side, second peer's side) per pair.
    sides: Vec<(usize, usize)>,
}

impl Network<'_> {
    fn point(&self, trades: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.layout.problem.num_vars()];
        for (&(n, m, v_nm, v_mn, _), &t) in self.layout.pairs.iter().zip(trades) {
            x[v_nm] = t;
            x[v_mn] = -t;
            x[self.layout.net[n]] += t;
            x[self.layout.net[m]] -= t;
        }
        x
    }

    fn duals(&self, state: &State) -> Vec<f64> {
        let mut duals = vec![0.0; self.layout.problem.num_rows()];
        duals[..state.t.len()].copy_from_slice(&state.t);
        for (&(.., row), price) in self.layout.pairs.iter().zip(state.prices(&self.sides)) {
            duals[row] = price;
        }
        duals
    }
}

/// Objective terms of one stage: each peer's own injection and each of its
/// trade sides.
struct Stage {
    own: Vec<VarSpec>,
    side: Vec<VarSpec>,
}

/// Runs rounds until agreement or `cfg.max_rounds`. Returns whether the
/// peers agreed; `state` holds the best iterate seen.
fn run_stage(
    net: &Network,
    stage: &Stage,
    state: &mut State,
    cfg: &NegotiationConfig,
    first_round: usize,
    rounds: &mut Vec<TraceRound>,
    accept: &dyn Fn(&State) -> bool,
) -> Result<bool, NegotiationError> {
    let peers = net.instance.peers();
    let sent: Vec<usize> = net.by_peer.iter().map(Vec::len).collect();
    let messages = sent.iter().sum();
    let mut terms: Vec<Term> = Vec::new();
    let mut out = Vec::new();
    let mut best: Option<(f64, State)> = None;
    let mut rho_changes = 0;
    for round in 0..cfg.max_rounds {
        for (n, own_edges) in net.by_peer.iter().enumerate() {
            terms.clear();
            terms.extend(own_edges.iter().map(|&e| Term {
                spec: stage.side[e],
                coef: 1.0,
                target: net.edges[e].dir * state.z[net.edges[e].pair] - state.u[e],
            }));
            out.resize(terms.len(), 0.0);
            let (_, t) = local::solve(&stage.own[n], &terms, state.rho, state.t[n], &mut out)
                .ok_or_else(|| NegotiationError::Infeasible(peers[n].id.clone()))?;
            state.t[n] = t;
            for (&e, &x) in own_edges.iter().zip(&out) {
                state.p[e] = x;
            }
        }
        let mut primal = 0.0f64;
        let mut change = 0.0f64;
        for (k, &(a, b)) in net.sides.iter().enumerate() {
            let z = 0.5 * ((state.p[a] + state.u[a]) - (state.p[b] + state.u[b]));
            change = change.max((z - state.z[k]).abs());
            state.z[k] = z;
            state.u[a] += state.p[a] - z;
            state.u[b] += state.p[b] + z;
            primal = primal.max((state.p[a] + state.p[b]).abs());
        }
        let dual = state.rho * change;
        let x = net.point(&state.symmetric(&net.sides));
        rounds.push(TraceRound {
            round: first_round + round + 1,
            primal_residual: primal,
            dual_residual: dual,
            objective: net.layout.problem.objective(&x),
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
                state.u.iter_mut().for_each(|u| *u /= f);
            }
        }
    }
    if let Some((_, s)) = best {
        *state = s;
    }
    Ok(false)
}

/// Negotiates the full P2P market: every peer proposes its trades from its
/// own cost and bounds, and each pair settles on the average of the two
/// proposals, with a price update on disagreement.
pub fn negotiate_full_p2p(
    instance: &MarketInstance,
    cfg: &NegotiationConfig,
) -> Result<(ClearingResult, NegotiationTrace), NegotiationError> {
    cfg.validate()?;
    let layout = build(instance);
    let peers = instance.peers();
    let mut edges = Vec::new();
    let mut by_peer = vec![Vec::new(); peers.len()];
    let mut sides = Vec::new();
    let mut side_spec = Vec::new();
    for (k, &(n, m, ..)) in layout.pairs.iter().enumerate() {
        let half = 0.5 * pair_fee(instance, n, m);
        let a = edges.len();
        for (owner, dir) in [(n, 1.0), (m, -1.0)] {
            let (lo, hi) = peers[owner].trade_bounds();
            by_peer[owner].push(edges.len());
            edges.push(Edge { owner, pair: k, dir });
            side_spec.push(VarSpec::free().abs(half).bounds(lo, hi));
        }
        sides.push((a, a + 1));
    }
    let net = Network {
        instance,
        layout,
        edges,
        by_peer,
        sides,
    };
    let own: Vec<VarSpec> = peers
        .iter()
        .map(|p| {
            VarSpec::free()
                .quad(p.cost.a)
                .lin(p.cost.b)
                .bounds(p.bounds.lower, p.bounds.upper)
        })
        .collect();
    let stage = Stage { own, side: side_spec };
    let mut state = State {
        p: vec![0.0; net.edges.len()],
        u: vec![0.0; net.edges.len()],
        z: vec![0.0; net.sides.len()],
        t: peers.iter().map(|p| p.cost.b).collect(),
        rho: cfg.rho,
    };
    let mut trace = NegotiationTrace {
        agents: peers.iter().map(|p| p.id.clone()).collect(),
        ..Default::default()
    };
    let problem = &net.layout.problem;
    let limit = publish_tolerance(cfg);
    let published = |s: &State| {
        let x = net.point(&s.symmetric(&net.sides));
        check_kkt(problem, &x, &net.duals(s)).expect("dimensions match").max() <= SETTLE_MARGIN * limit
    };
    trace.converged = run_stage(&net, &stage, &mut state, cfg, 0, &mut trace.rounds, &published)?;

    let duals = net.duals(&state);
    let mut x = net.point(&state.symmetric(&net.sides));
    let mut kkt = check_kkt(problem, &x, &duals).expect("dimensions match");
    if trace.converged && cfg.tie_break {
        if let Some(t) = tie_break(&net, &stage, &state, &x, cfg, &mut trace) {
            let y = net.point(&t);
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
    let result = assemble(instance, &net.layout, &sol);
    if !trace.converged {
        return Err(NegotiationError::MaxRoundsExceeded {
            result: Box::new(result),
            trace: Box::new(trace),
        });
    }
    Ok((result, trace))
}

/// Second stage: with their injections and prices settled, peers look for
/// the smallest squared trade volume among the trades that stay optimal at
/// their own prices.
fn tie_break(
    net: &Network,
    stage: &Stage,
    state: &State,
    x: &[f64],
    cfg: &NegotiationConfig,
    trace: &mut NegotiationTrace,
) -> Option<Vec<f64>> {
    let prices = state.prices(&net.sides);
    let trades = state.symmetric(&net.sides);
    let own: Vec<VarSpec> = stage
        .own
        .iter()
        .enumerate()
        .map(|(n, spec)| {
            let s = x[net.layout.net[n]];
            let (lo, hi) = if spec.quad > 0.0 {
                (s, s)
            } else {
                let t = state.t[n];
                let (lo, hi) = minimizing_interval(spec.lin - t, 0.0, spec.lower, spec.upper, tie_tolerance(t));
                (lo.min(s), hi.max(s))
            };
            VarSpec::free().quad(0.5).bounds(lo, hi)
        })
        .collect();
    let side: Vec<VarSpec> = net
        .edges
        .iter()
        .zip(&stage.side)
        .map(|(e, spec)| {
            let t = state.t[e.owner];
            let price = prices[e.pair];
            let value = e.dir * trades[e.pair];
            let (lo, hi) = minimizing_interval(
                t - price,
                spec.abs,
                spec.lower,
                spec.upper,
                tie_tolerance(t.abs().max(price.abs())),
            );
            VarSpec::free().quad(0.5).bounds(lo.min(value), hi.max(value))
        })
        .collect();
    let face = Stage { own, side };
    let mut second = State {
        p: state.p.clone(),
        u: vec![0.0; state.u.len()],
        z: trades,
        t: vec![0.0; state.t.len()],
        rho: cfg.rho,
    };
    let problem = &net.layout.problem;
    let limit = publish_tolerance(cfg);
    let balanced = |s: &State| {
        let x = net.point(&s.symmetric(&net.sides));
        check_kkt(problem, &x, &net.duals(state))
            .expect("dimensions match")
            .primal_eq
            <= limit
    };
    let tight = settled(cfg);
    let first_round = trace.rounds.len();
    let agreed = run_stage(
        net,
        &face,
        &mut second,
        &tight,
        first_round,
        &mut trace.tie_break_rounds,
        &balanced,
    )
    .ok()?;
    agreed.then(|| second.symmetric(&net.sides))
}

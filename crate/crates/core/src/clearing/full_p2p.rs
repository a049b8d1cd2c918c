use crate::model::{Design, MarketInstance, Role};
use crate::qp::{self, QpProblem, QpSolution, SolveOptions, VarSpec};

use super::result::{ClearingResult, Node, StepMetrics, TradeMatrix, WelfareBreakdown};
use super::ClearingError;

/// Fee per MWh on the pair `(n, m)`: the per-trade fee, plus the grid
/// tariff when one side is the grid peer.
pub(crate) fn pair_fee(instance: &MarketInstance, n: usize, m: usize) -> f64 {
    let grid = instance.peer(n).role == Role::Grid || instance.peer(m).role == Role::Grid;
    instance.tx_costs().per_trade_fee + if grid { instance.grid_tariff() } else { 0.0 }
}

pub(crate) struct Layout {
    pub problem: QpProblem,
    pub net: Vec<usize>,
    /// (n, m, var P_nm, var P_mn, reciprocity row)
    pub pairs: Vec<(usize, usize, usize, usize, usize)>,
}

pub(crate) fn build(instance: &MarketInstance) -> Layout {
    let mut problem = QpProblem::new();
    let net: Vec<usize> = instance
        .peers()
        .iter()
        .map(|p| {
            problem.add_constant(p.cost.c);
            problem.add_var(
                VarSpec::free()
                    .quad(p.cost.a)
                    .lin(p.cost.b)
                    .bounds(p.bounds.lower, p.bounds.upper),
            )
        })
        .collect();
    let mut own: Vec<Vec<usize>> = vec![Vec::new(); instance.num_peers()];
    let mut pairs = Vec::new();
    for (n, m) in instance.partner_graph().pairs() {
        let half = 0.5 * pair_fee(instance, n, m);
        let (lo_n, hi_n) = instance.peer(n).trade_bounds();
        let (lo_m, hi_m) = instance.peer(m).trade_bounds();
        let p_nm = problem.add_var(VarSpec::free().abs(half).bounds(lo_n, hi_n));
        let p_mn = problem.add_var(VarSpec::free().abs(half).bounds(lo_m, hi_m));
        own[n].push(p_nm);
        own[m].push(p_mn);
        pairs.push((n, m, p_nm, p_mn, 0));
    }
    for (n, s) in net.iter().enumerate() {
        let terms = std::iter::once((*s, 1.0)).chain(own[n].iter().map(|&v| (v, -1.0)));
        problem.add_equality(terms, 0.0);
    }
    for pair in &mut pairs {
        pair.4 = problem.add_equality([(pair.2, 1.0), (pair.3, 1.0)], 0.0);
    }
    Layout { problem, net, pairs }
}

/// Minimizes total cost plus fees over bilateral trades `P_nm` subject to
/// reciprocity, role signs and per-peer bounds on `Σ_m P_nm`.
pub fn clear_full_p2p(instance: &MarketInstance, opts: &SolveOptions) -> Result<ClearingResult, ClearingError> {
    let layout = build(instance);
    let sol = qp::solve(&layout.problem, opts)?;
    Ok(assemble(instance, &layout, &sol))
}

pub(crate) fn assemble(instance: &MarketInstance, layout: &Layout, sol: &QpSolution) -> ClearingResult {
    let peers = instance.peers();
    let nodes = (0..peers.len()).map(Node::Peer).collect();
    let labels = peers.iter().map(|p| p.id.clone()).collect();
    let mut trades = TradeMatrix::new(nodes, labels);
    for &(n, m, v_nm, v_mn, row) in &layout.pairs {
        trades.insert(n, m, 0.5 * (sol.x[v_nm] - sol.x[v_mn]), sol.duals[row]);
    }
    let net: Vec<f64> = layout.net.iter().map(|&v| sol.x[v]).collect();
    let grid_peer = instance.grid_peer();
    let tariff = instance.grid_tariff();
    let price = instance.grid_terms().map_or(0.0, |g| g.price);

    let mut welfare = WelfareBreakdown::default();
    let mut metrics = StepMetrics::default();
    for (peer, &s) in peers.iter().zip(&net) {
        let cost = peer.cost.evaluate(s);
        match peer.role {
            Role::Producer => welfare.generation_cost += cost,
            Role::Consumer => {
                welfare.consumer_utility -= cost;
                metrics.load -= s;
            }
            Role::Grid => welfare.grid_exchange_cost += cost,
        }
        if peer.role != Role::Grid {
            metrics.production += s.max(0.0);
            metrics.consumption += (-s).max(0.0);
        }
    }
    for p in trades.pairs() {
        let mag = p.mw.abs();
        welfare.transaction_costs += instance.tx_costs().per_trade_fee * mag;
        let grid_side = if Some(p.a) == grid_peer {
            Some(p.mw)
        } else if Some(p.b) == grid_peer {
            Some(-p.mw)
        } else {
            None
        };
        match grid_side {
            Some(sold_by_grid) => {
                welfare.grid_exchange_cost += tariff * mag;
                metrics.import += sold_by_grid.max(0.0);
                metrics.export += (-sold_by_grid).max(0.0);
            }
            None => {
                let (ca, cb) = (&peers[p.a].community, &peers[p.b].community);
                if ca.is_some() && cb.is_some() && ca != cb {
                    metrics.community_exchange += mag;
                }
            }
        }
    }
    metrics.import_cost = metrics.import * (price + tariff);
    metrics.export_revenue = metrics.export * (price - tariff);
    welfare.total =
        welfare.consumer_utility - welfare.generation_cost - welfare.transaction_costs - welfare.grid_exchange_cost;

    ClearingResult {
        design: Design::FullP2p,
        status: sol.status,
        trades: Some(trades),
        community_decisions: Vec::new(),
        objective_value: -welfare.total,
        social_welfare: welfare.total,
        transaction_cost_total: welfare.transaction_costs,
        welfare,
        kkt: sol.kkt,
        peer_ids: peers.iter().map(|p| p.id.clone()).collect(),
        net_injection: net,
        metrics,
        iterations: sol.iterations,
    }
}

use crate::model::{Design, MarketInstance};
use crate::qp::{self, QpProblem, SolveOptions, VarSpec};

use super::community::{account_members, add_block};
use super::result::{ClearingResult, Node, StepMetrics, TradeMatrix, WelfareBreakdown};
use super::ClearingError;

/// Hybrid design as one QP: every community clears internally, and the
/// community managers trade bilaterally with each other and with the grid.
/// A manager's net sales equal its community's export minus import.
pub fn clear_hybrid(instance: &MarketInstance, opts: &SolveOptions) -> Result<ClearingResult, ClearingError> {
    let num_communities = instance.communities().len();
    if num_communities == 0 {
        return Err(ClearingError::InvalidInput(
            "the hybrid design needs at least one community".into(),
        ));
    }
    let peers = instance.peers();
    let mut problem = QpProblem::new();
    let blocks: Vec<_> = (0..num_communities)
        .map(|k| add_block(&mut problem, instance, k, None))
        .collect();

    // Upper-level nodes: managers first, then the grid peer.
    let mut nodes: Vec<Node> = (0..num_communities).map(Node::Community).collect();
    let mut labels: Vec<String> = instance.communities().iter().map(|c| c.id.clone()).collect();
    let grid = instance.grid_peer();
    let mut grid_net = None;
    if let Some(g) = grid {
        let peer = &peers[g];
        problem.add_constant(peer.cost.c);
        grid_net = Some(problem.add_var(VarSpec::free().quad(peer.cost.a).lin(peer.cost.b)));
        nodes.push(Node::Peer(g));
        labels.push(peer.id.clone());
    }
    let num_nodes = nodes.len();
    let tariff = instance.grid_tariff();
    let mut own: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
    let mut pairs = Vec::new();
    for a in 0..num_nodes {
        for b in a + 1..num_nodes {
            let fee = match (nodes[a], nodes[b]) {
                (Node::Community(ka), Node::Community(kb)) => instance.inter_community_fee(ka, kb),
                _ => tariff,
            };
            let v_ab = problem.add_var(VarSpec::free().abs(0.5 * fee));
            let v_ba = problem.add_var(VarSpec::free().abs(0.5 * fee));
            own[a].push(v_ab);
            own[b].push(v_ba);
            pairs.push((a, b, v_ab, v_ba, fee));
        }
    }
    for (k, block) in blocks.iter().enumerate() {
        let terms = own[k]
            .iter()
            .map(|&v| (v, 1.0))
            .chain([(block.q_exp, -1.0), (block.q_imp, 1.0)]);
        problem.add_equality(terms, 0.0);
    }
    if let Some(s) = grid_net {
        let terms = std::iter::once((s, 1.0)).chain(own[num_nodes - 1].iter().map(|&v| (v, -1.0)));
        problem.add_equality(terms, 0.0);
    }
    let rows: Vec<usize> = pairs
        .iter()
        .map(|&(_, _, v_ab, v_ba, _)| problem.add_equality([(v_ab, 1.0), (v_ba, 1.0)], 0.0))
        .collect();

    let sol = qp::solve(&problem, opts)?;

    let mut trades = TradeMatrix::new(nodes.clone(), labels);
    let mut welfare = WelfareBreakdown::default();
    let mut metrics = StepMetrics::default();
    let price = instance.grid_terms().map_or(0.0, |g| g.price);
    for (&(a, b, v_ab, v_ba, fee), &row) in pairs.iter().zip(&rows) {
        let mw = 0.5 * (sol.x[v_ab] - sol.x[v_ba]);
        trades.insert(a, b, mw, sol.duals[row]);
        let mag = mw.abs();
        if let Node::Peer(_) = nodes[b] {
            // Manager `a` with the grid; positive `mw` is an export.
            welfare.grid_exchange_cost += fee * mag;
            metrics.export += mw.max(0.0);
            metrics.import += (-mw).max(0.0);
        } else {
            welfare.transaction_costs += fee * mag;
            metrics.community_exchange += mag;
            metrics.inter_community_fees += fee * mag;
        }
    }
    metrics.import_cost = metrics.import * (price + tariff);
    metrics.export_revenue = metrics.export * (price - tariff);

    let mut net = vec![0.0; peers.len()];
    let mut decisions = Vec::with_capacity(blocks.len());
    for block in &blocks {
        let d = block.decision(instance, &sol);
        account_members(instance, &d, &mut welfare, &mut metrics);
        for m in &d.members {
            net[m.peer] = m.p;
        }
        decisions.push(d);
    }
    if let (Some(g), Some(s)) = (grid, grid_net) {
        net[g] = sol.x[s];
        welfare.grid_exchange_cost += peers[g].cost.evaluate(sol.x[s]);
    }
    welfare.total =
        welfare.consumer_utility - welfare.generation_cost - welfare.transaction_costs - welfare.grid_exchange_cost;

    Ok(ClearingResult {
        design: Design::Hybrid,
        status: sol.status,
        trades: Some(trades),
        community_decisions: decisions,
        objective_value: -welfare.total,
        social_welfare: welfare.total,
        transaction_cost_total: welfare.transaction_costs,
        welfare,
        kkt: sol.kkt,
        peer_ids: peers.iter().map(|p| p.id.clone()).collect(),
        net_injection: net,
        metrics,
        iterations: sol.iterations,
    })
}

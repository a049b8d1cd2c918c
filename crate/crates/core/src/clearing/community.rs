use crate::model::{CommunitySpec, Design, ExternalCost, MarketInstance, Role};
use crate::qp::{self, KktResiduals, QpProblem, QpSolution, SolveOptions, Status, VarSpec};

use super::result::{ClearingResult, CommunityDecision, MemberDecision, StepMetrics, WelfareBreakdown};
use super::ClearingError;

pub(crate) struct MemberVars {
    pub peer: usize,
    pub p: usize,
    pub q: usize,
    pub alpha: usize,
    pub beta: usize,
    pub row: usize,
}

/// Variables and rows of one community inside a larger QP.
pub(crate) struct CommunityBlock {
    pub k: usize,
    pub members: Vec<MemberVars>,
    pub q_imp: usize,
    pub q_exp: usize,
    pub pool_row: usize,
    pub imp_row: usize,
    pub exp_row: usize,
}

/// Adds members' `(p, q, α, β)`, the aggregates and the balance rows.
/// The aggregates are priced by `external` when given and are free of cost
/// otherwise.
pub(crate) fn add_block(
    problem: &mut QpProblem,
    instance: &MarketInstance,
    k: usize,
    external: Option<ExternalCost>,
) -> CommunityBlock {
    let spec = &instance.communities()[k];
    let mut members = Vec::new();
    for &n in instance.community_members(k) {
        let peer = instance.peer(n);
        problem.add_constant(peer.cost.c);
        let p = problem.add_var(
            VarSpec::free()
                .quad(peer.cost.a)
                .lin(peer.cost.b)
                .bounds(peer.bounds.lower, peer.bounds.upper),
        );
        let q = problem.add_var(VarSpec::free().abs(spec.internal_fee));
        let alpha = problem.add_var(VarSpec::free().lin(spec.import_weight).bounds(0.0, f64::INFINITY));
        let beta = problem.add_var(VarSpec::free().lin(spec.export_weight).bounds(0.0, f64::INFINITY));
        let row = problem.add_equality([(p, 1.0), (q, 1.0), (alpha, 1.0), (beta, -1.0)], 0.0);
        members.push(MemberVars {
            peer: n,
            p,
            q,
            alpha,
            beta,
            row,
        });
    }
    let g = external.unwrap_or(ExternalCost {
        import_quadratic: 0.0,
        import_linear: 0.0,
        export_quadratic: 0.0,
        export_linear: 0.0,
    });
    let q_imp = problem.add_var(
        VarSpec::free()
            .quad(g.import_quadratic)
            .lin(g.import_linear)
            .bounds(0.0, f64::INFINITY),
    );
    let q_exp = problem.add_var(
        VarSpec::free()
            .quad(g.export_quadratic)
            .lin(g.export_linear)
            .bounds(0.0, f64::INFINITY),
    );
    let pool_row = problem.add_equality(members.iter().map(|m| (m.q, 1.0)), 0.0);
    let imp_row = problem.add_equality(members.iter().map(|m| (m.alpha, 1.0)).chain([(q_imp, -1.0)]), 0.0);
    let exp_row = problem.add_equality(members.iter().map(|m| (m.beta, 1.0)).chain([(q_exp, -1.0)]), 0.0);
    CommunityBlock {
        k,
        members,
        q_imp,
        q_exp,
        pool_row,
        imp_row,
        exp_row,
    }
}

impl CommunityBlock {
    pub fn decision(&self, instance: &MarketInstance, sol: &QpSolution) -> CommunityDecision {
        let x = &sol.x;
        let members: Vec<MemberDecision> = self
            .members
            .iter()
            .map(|m| MemberDecision {
                peer: m.peer,
                id: instance.peer(m.peer).id.clone(),
                p: x[m.p],
                q: x[m.q],
                alpha: x[m.alpha],
                beta: x[m.beta],
            })
            .collect();
        CommunityDecision {
            community: self.k,
            id: instance.communities()[self.k].id.clone(),
            members,
            q_imp: x[self.q_imp],
            q_exp: x[self.q_exp],
            pool_price: sol.duals[self.pool_row],
        }
    }
}

/// Adds the members' costs and fees of `d` to `welfare`, and their
/// energy figures to `metrics`.
pub(crate) fn account_members(
    instance: &MarketInstance,
    d: &CommunityDecision,
    welfare: &mut WelfareBreakdown,
    metrics: &mut StepMetrics,
) {
    let spec = &instance.communities()[d.community];
    for m in &d.members {
        let peer = instance.peer(m.peer);
        let cost = peer.cost.evaluate(m.p);
        match peer.role {
            Role::Consumer => {
                welfare.consumer_utility -= cost;
                metrics.load -= m.p;
            }
            _ => welfare.generation_cost += cost,
        }
        metrics.production += m.p.max(0.0);
        metrics.consumption += (-m.p).max(0.0);
        let weights = spec.import_weight * m.alpha + spec.export_weight * m.beta;
        welfare.transaction_costs += spec.internal_fee * m.q.abs() + weights;
        welfare.import_export_weights += weights;
    }
}

pub(crate) fn community_index(instance: &MarketInstance, community: &CommunitySpec) -> Result<usize, ClearingError> {
    let k = instance
        .community_index(&community.id)
        .ok_or_else(|| ClearingError::InvalidInput(format!("unknown community `{}`", community.id)))?;
    if instance.communities()[k] != *community {
        return Err(ClearingError::InvalidInput(format!(
            "community `{}` differs from the instance's definition",
            community.id
        )));
    }
    Ok(k)
}

/// Clears one community against its external cost `G`.
pub fn clear_community(
    instance: &MarketInstance,
    community: &CommunitySpec,
    opts: &SolveOptions,
) -> Result<ClearingResult, ClearingError> {
    let k = community_index(instance, community)?;
    let (result, _) = clear_one(instance, k, opts)?;
    Ok(result)
}

/// The QP of community `k` priced by its external cost.
pub(crate) fn community_problem(instance: &MarketInstance, k: usize) -> (QpProblem, CommunityBlock) {
    let mut problem = QpProblem::new();
    let block = add_block(&mut problem, instance, k, Some(instance.external_cost(k)));
    (problem, block)
}

fn clear_one(instance: &MarketInstance, k: usize, opts: &SolveOptions) -> Result<(ClearingResult, f64), ClearingError> {
    let (problem, block) = community_problem(instance, k);
    let sol = qp::solve(&problem, opts)?;
    Ok(community_result(instance, &block, &sol))
}

/// Maps a solution of [`community_problem`] to a result, along with the
/// community's net purchase from the grid.
pub(crate) fn community_result(
    instance: &MarketInstance,
    block: &CommunityBlock,
    sol: &QpSolution,
) -> (ClearingResult, f64) {
    let g = instance.external_cost(block.k);
    let d = block.decision(instance, sol);

    let mut welfare = WelfareBreakdown::default();
    let mut metrics = StepMetrics::default();
    account_members(instance, &d, &mut welfare, &mut metrics);
    welfare.grid_exchange_cost = g.evaluate(d.q_imp, d.q_exp);
    metrics.import = d.q_imp;
    metrics.export = d.q_exp;
    metrics.import_cost = g.import_cost(d.q_imp);
    metrics.export_revenue = -g.export_cost(d.q_exp);
    welfare.total =
        welfare.consumer_utility - welfare.generation_cost - welfare.transaction_costs - welfare.grid_exchange_cost;
    let grid_net = d.q_imp - d.q_exp;
    let result = ClearingResult {
        design: Design::Community,
        status: sol.status,
        trades: None,
        peer_ids: d.members.iter().map(|m| m.id.clone()).collect(),
        net_injection: d.members.iter().map(|m| m.p).collect(),
        community_decisions: vec![d],
        objective_value: -welfare.total,
        social_welfare: welfare.total,
        transaction_cost_total: welfare.transaction_costs,
        welfare,
        kkt: sol.kkt,
        metrics,
        iterations: sol.iterations,
    };
    (result, grid_net)
}

/// Community design: every community clears on its own against the grid,
/// and the results are summed.
pub fn clear_community_design(instance: &MarketInstance, opts: &SolveOptions) -> Result<ClearingResult, ClearingError> {
    if instance.communities().is_empty() {
        return Err(ClearingError::InvalidInput(
            "the community design needs at least one community".into(),
        ));
    }
    let peers = instance.peers();
    let mut net = vec![0.0; peers.len()];
    let mut welfare = WelfareBreakdown::default();
    let mut metrics = StepMetrics::default();
    let mut kkt = KktResiduals::default();
    let mut decisions = Vec::new();
    let mut iterations = 0;
    let mut grid_net = 0.0;
    for k in 0..instance.communities().len() {
        let (r, g) = clear_one(instance, k, opts)?;
        grid_net += g;
        iterations += r.iterations;
        kkt.primal_eq = kkt.primal_eq.max(r.kkt.primal_eq);
        kkt.stationarity = kkt.stationarity.max(r.kkt.stationarity);
        kkt.complementarity = kkt.complementarity.max(r.kkt.complementarity);
        let w = r.welfare;
        welfare.generation_cost += w.generation_cost;
        welfare.consumer_utility += w.consumer_utility;
        welfare.transaction_costs += w.transaction_costs;
        welfare.import_export_weights += w.import_export_weights;
        welfare.grid_exchange_cost += w.grid_exchange_cost;
        let m = r.metrics;
        metrics.production += m.production;
        metrics.consumption += m.consumption;
        metrics.load += m.load;
        metrics.import += m.import;
        metrics.export += m.export;
        metrics.import_cost += m.import_cost;
        metrics.export_revenue += m.export_revenue;
        for d in r.community_decisions {
            for mem in &d.members {
                net[mem.peer] = mem.p;
            }
            decisions.push(d);
        }
    }
    if let Some(g) = instance.grid_peer() {
        net[g] = grid_net;
    }
    welfare.total =
        welfare.consumer_utility - welfare.generation_cost - welfare.transaction_costs - welfare.grid_exchange_cost;
    Ok(ClearingResult {
        design: Design::Community,
        status: Status::Optimal,
        trades: None,
        community_decisions: decisions,
        objective_value: -welfare.total,
        social_welfare: welfare.total,
        transaction_cost_total: welfare.transaction_costs,
        welfare,
        kkt,
        peer_ids: peers.iter().map(|p| p.id.clone()).collect(),
        net_injection: net,
        metrics,
        iterations,
    })
}

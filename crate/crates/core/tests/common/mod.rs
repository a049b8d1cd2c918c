#![allow(dead_code)]

use p2p_market::qp::{QpProblem, VarSpec};
use rand::Rng;

/// Random QP with one to three variables, finite boxes of width at most one
/// and at most one equality row that some box point satisfies.
pub fn small_qp(rng: &mut impl Rng) -> QpProblem {
    let n = rng.gen_range(1..=3);
    let mut p = QpProblem::new();
    let mut inside = Vec::with_capacity(n);
    for _ in 0..n {
        let lower = rng.gen_range(-1.0..0.5);
        let upper = lower + rng.gen_range(0.2..1.0);
        let quad = if rng.gen_bool(0.25) {
            0.0
        } else {
            rng.gen_range(0.0..2.0)
        };
        let abs = if rng.gen_bool(0.5) {
            rng.gen_range(0.0..1.0)
        } else {
            0.0
        };
        p.add_var(
            VarSpec::free()
                .quad(quad)
                .lin(rng.gen_range(-3.0..3.0))
                .abs(abs)
                .bounds(lower, upper),
        );
        inside.push(rng.gen_range(lower..=upper));
    }
    if rng.gen_bool(0.6) {
        let coefs: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    rng.gen_range(0.3..2.0)
                }
            })
            .collect();
        let rhs = coefs.iter().zip(&inside).map(|(c, x)| c * x).sum();
        p.add_equality(coefs.into_iter().enumerate(), rhs);
    }
    p
}

const STEP: f64 = 1e-3;

fn grid(lower: f64, upper: f64) -> impl Iterator<Item = f64> {
    let k = ((upper - lower) / STEP).ceil() as usize;
    (0..=k).map(move |i| (lower + i as f64 * STEP).min(upper))
}

/// Smallest objective over a 1e-3 grid of the box, restricted to the
/// equality row when there is one (the variable with the largest coefficient
/// is solved for and must land inside its box).
pub fn grid_minimum(p: &QpProblem) -> Option<f64> {
    let vars = p.vars();
    if p.num_rows() == 0 {
        let total = vars
            .iter()
            .map(|v| grid(v.lower, v.upper).map(|x| v.value(x)).fold(f64::INFINITY, f64::min))
            .sum::<f64>();
        return Some(total + p.constant());
    }
    let row = p.row(0);
    let rhs = p.rhs()[0];
    let &(pivot, pc) = row.iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
    let others: Vec<(usize, f64)> = row.iter().copied().filter(|&(i, _)| i != pivot).collect();
    let mut best = f64::INFINITY;
    let mut eval = |assign: &[(usize, f64)]| {
        let s: f64 = assign.iter().zip(&others).map(|(&(_, x), &(_, c))| c * x).sum();
        let xp = (rhs - s) / pc;
        let pv = &vars[pivot];
        if xp >= pv.lower && xp <= pv.upper {
            let obj = pv.value(xp) + assign.iter().map(|&(i, x)| vars[i].value(x)).sum::<f64>();
            best = best.min(obj);
        }
    };
    match others.as_slice() {
        [] => eval(&[]),
        [(i, _)] => {
            for x in grid(vars[*i].lower, vars[*i].upper) {
                eval(&[(*i, x)]);
            }
        }
        [(i, _), (j, _)] => {
            for x in grid(vars[*i].lower, vars[*i].upper) {
                for y in grid(vars[*j].lower, vars[*j].upper) {
                    eval(&[(*i, x), (*j, y)]);
                }
            }
        }
        _ => unreachable!("at most three variables"),
    }
    best.is_finite().then_some(best + p.constant())
}

use p2p_market::model::{
    build_instance, CommunitySpec, Design, GridTerms, InstanceConfig, MarketInstance, Peer, PowerBounds, QuadraticCost,
    Role, TransactionCostSpec,
};

pub fn peer(id: &str, role: Role, cost: QuadraticCost, bounds: PowerBounds) -> Peer {
    Peer {
        id: id.into(),
        role,
        bus: 0,
        community: None,
        cost,
        bounds,
        must_take: false,
    }
}

/// Random market with `n` peers (one of them the grid when `with_grid`),
/// strictly convex costs for dispatchable peers, some must-take producers,
/// and peers spread over `communities` communities.
pub fn random_market(
    rng: &mut impl Rng,
    n: usize,
    with_grid: bool,
    communities: usize,
    per_trade_fee: f64,
    internal_fee: f64,
    inter_fee: f64,
) -> MarketInstance {
    let mut peers = Vec::new();
    if with_grid {
        peers.push(peer("grid", Role::Grid, QuadraticCost::ZERO, PowerBounds::unbounded()));
    }
    let k = peers.len();
    for i in k..n {
        let mut p = if i % 2 == 0 {
            if rng.gen_bool(0.3) {
                let out = rng.gen_range(0.0..4.0);
                let mut p = peer(
                    &format!("r{i}"),
                    Role::Producer,
                    QuadraticCost::ZERO,
                    PowerBounds::fixed(out),
                );
                p.must_take = true;
                p
            } else {
                let cost = QuadraticCost::new(rng.gen_range(0.05..0.5), rng.gen_range(5.0..40.0), 0.0);
                peer(
                    &format!("g{i}"),
                    Role::Producer,
                    cost,
                    PowerBounds::new(0.0, rng.gen_range(2.0..10.0)),
                )
            }
        } else {
            let cost = QuadraticCost::new(rng.gen_range(0.05..0.5), rng.gen_range(30.0..80.0), 0.0);
            peer(
                &format!("c{i}"),
                Role::Consumer,
                cost,
                PowerBounds::new(-rng.gen_range(2.0..10.0), 0.0),
            )
        };
        if communities > 0 {
            p.community = Some(format!("k{}", i % communities));
        }
        peers.push(p);
    }
    let specs: Vec<CommunitySpec> = (0..communities)
        .map(|c| CommunitySpec {
            id: format!("k{c}"),
            members: peers
                .iter()
                .filter(|p| p.community.as_deref() == Some(format!("k{c}").as_str()))
                .map(|p| p.id.clone())
                .collect(),
            internal_fee,
            import_weight: 0.0,
            export_weight: 0.0,
            external_cost: None,
        })
        .collect();
    let mut tx = TransactionCostSpec {
        per_trade_fee,
        inter_community_fees: vec![],
    };
    for a in 0..communities {
        for b in a + 1..communities {
            tx.set_inter_community_fee(&format!("k{a}"), &format!("k{b}"), inter_fee);
        }
    }
    build_instance(InstanceConfig {
        design: if communities > 0 {
            Design::Hybrid
        } else {
            Design::FullP2p
        },
        grid: with_grid.then_some(GridTerms {
            price: rng.gen_range(20.0..60.0),
            tariff: 10.0,
        }),
        peers,
        communities: specs,
        transaction_costs: tx,
        partners: None,
    })
    .unwrap()
}

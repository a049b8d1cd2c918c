use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::TimeSeriesBundle;
use crate::model::{
    build_instance, CommunitySpec, Design, GridTerms, InstanceConfig, MarketInstance, Peer, PowerBounds, QuadraticCost,
    Role, TransactionCostSpec,
};

const STEP_MINUTES: f64 = 30.0;
const TARIFF: f64 = 10.0;
const PER_TRADE_FEE: f64 = 0.001;
const INTERNAL_FEE: f64 = 0.001;
const INTER_FEES: [f64; 3] = [2.0, 1.0, 1.5];

#[derive(Clone, Copy)]
enum Kind {
    Wind,
    Pv,
    Conventional,
    Household,
}

/// Peer kind by position inside its community: wind, PV, one conventional
/// unit, then households.
fn kind(position: usize) -> Kind {
    match position {
        0 => Kind::Wind,
        1 => Kind::Pv,
        2 => Kind::Conventional,
        _ => Kind::Household,
    }
}

fn series_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn noise(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    scale * (rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)) / 2.0
}

/// Deterministic horizon for `num_peers` peers (ids `1..=num_peers`) plus a
/// grid peer (id `num_peers + 1`), spread round-robin over
/// `num_communities` communities, at 30-minute steps from 2012-07-01.
///
/// Ranges: wind 15-30 MW, PV 8-15 MW (must-take); conventional 3-6 MW with
/// a in [0.02, 0.1], b in [25, 55]; households 1.5-4 MW with a in [2, 6],
/// b in [55, 95]. Prices are 40 ± 15 $/MWh with a daily cycle and the grid
/// tariff is 10 $/MWh.
pub fn gen_synthetic(
    seed: u64,
    num_peers: usize,
    num_communities: usize,
    steps: usize,
) -> (TimeSeriesBundle, MarketInstance) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let community_id = |k: usize| format!("c{}", k + 1);

    let mut peers = Vec::with_capacity(num_peers + 1);
    let mut kinds = Vec::with_capacity(num_peers);
    let mut members: Vec<Vec<String>> = vec![Vec::new(); num_communities];
    for i in 0..num_peers {
        let (community, position) = if num_communities == 0 {
            (None, i)
        } else {
            (Some(i % num_communities), i / num_communities)
        };
        let k = kind(position);
        let id = (i + 1).to_string();
        let (role, cost, bounds, must_take) = match k {
            Kind::Wind => (
                Role::Producer,
                QuadraticCost::ZERO,
                PowerBounds::fixed(rng.gen_range(15.0..30.0)),
                true,
            ),
            Kind::Pv => (
                Role::Producer,
                QuadraticCost::ZERO,
                PowerBounds::fixed(rng.gen_range(8.0..15.0)),
                true,
            ),
            Kind::Conventional => (
                Role::Producer,
                QuadraticCost::new(rng.gen_range(0.02..0.1), rng.gen_range(25.0..55.0), 0.0),
                PowerBounds::new(0.0, rng.gen_range(3.0..6.0)),
                false,
            ),
            Kind::Household => (
                Role::Consumer,
                QuadraticCost::new(rng.gen_range(2.0..6.0), rng.gen_range(55.0..95.0), 0.0),
                PowerBounds::new(-rng.gen_range(1.5..4.0), 0.0),
                false,
            ),
        };
        if let Some(c) = community {
            members[c].push(id.clone());
        }
        peers.push(Peer {
            id,
            role,
            bus: i as u32,
            community: community.map(community_id),
            cost,
            bounds,
            must_take,
        });
        kinds.push(k);
    }
    peers.push(Peer {
        id: (num_peers + 1).to_string(),
        role: Role::Grid,
        bus: num_peers as u32,
        community: None,
        cost: QuadraticCost::ZERO,
        bounds: PowerBounds::unbounded(),
        must_take: false,
    });

    let communities: Vec<CommunitySpec> = members
        .into_iter()
        .enumerate()
        .map(|(k, members)| CommunitySpec {
            id: community_id(k),
            members,
            internal_fee: INTERNAL_FEE,
            import_weight: 0.0,
            export_weight: 0.0,
            external_cost: None,
        })
        .collect();
    let mut transaction_costs = TransactionCostSpec {
        per_trade_fee: PER_TRADE_FEE,
        inter_community_fees: Vec::new(),
    };
    let mut pair = 0;
    for a in 0..num_communities {
        for b in a + 1..num_communities {
            transaction_costs.set_inter_community_fee(
                &community_id(a),
                &community_id(b),
                INTER_FEES[pair % INTER_FEES.len()],
            );
            pair += 1;
        }
    }

    let start = NaiveDate::from_ymd_opt(2012, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start date");
    let timestamps: Vec<_> = (0..steps).map(|s| start + Duration::minutes(30 * s as i64)).collect();
    let hour = |s: usize| (s as f64 * STEP_MINUTES / 60.0) % 24.0;

    let mut profiles = BTreeMap::new();
    let mut capacities = BTreeMap::new();
    for (n, (peer, k)) in peers.iter().zip(&kinds).enumerate() {
        // One stream per series so that horizons of different lengths share
        // their common prefix.
        let mut rng = series_rng(seed, n as u64 + 1);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let series: Vec<f64> = (0..steps)
            .map(|s| {
                let h = hour(s);
                let v = match k {
                    Kind::Wind => 0.45 + 0.3 * (2.0 * PI * s as f64 / 96.0 + phase).sin() + noise(&mut rng, 0.2),
                    Kind::Pv => {
                        let sun = (PI * (h - 6.0) / 12.0).sin().max(0.0);
                        sun * (0.85 + noise(&mut rng, 0.3))
                    }
                    Kind::Household => {
                        0.55 + 0.2 * (2.0 * PI * (h - 13.0) / 24.0).sin()
                            + 0.1 * (4.0 * PI * (h - 3.0) / 24.0).sin()
                            + noise(&mut rng, 0.15)
                    }
                    Kind::Conventional => 1.0,
                };
                v.clamp(0.0, 1.0)
            })
            .collect();
        if matches!(k, Kind::Conventional) {
            continue;
        }
        let cap = match peer.role {
            Role::Consumer => -peer.bounds.lower,
            _ => peer.bounds.upper,
        };
        capacities.insert(peer.id.clone(), cap);
        profiles.insert(peer.id.clone(), series);
    }
    let mut rng = series_rng(seed, 0);
    let prices: Vec<f64> = (0..steps)
        .map(|s| {
            let h = hour(s);
            (40.0 + 12.0 * (2.0 * PI * (h - 12.0) / 24.0).sin() + noise(&mut rng, 6.0)).clamp(25.0, 55.0)
        })
        .collect();

    let design = if num_communities == 0 {
        Design::FullP2p
    } else {
        Design::Hybrid
    };
    let instance = build_instance(InstanceConfig {
        design,
        grid: Some(GridTerms {
            price: prices.first().copied().unwrap_or(40.0),
            tariff: TARIFF,
        }),
        peers,
        communities,
        transaction_costs,
        partners: None,
    })
    .expect("generated instances are valid");
    let bundle = TimeSeriesBundle {
        timestamps,
        step_minutes: STEP_MINUTES,
        profiles,
        prices,
        capacities,
    };
    (bundle, instance)
}

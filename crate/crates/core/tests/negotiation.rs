mod common;

use p2p_market::clearing::{clear_community, clear_full_p2p, ClearingResult};
use p2p_market::negotiation::{negotiate_community, negotiate_full_p2p, NegotiationConfig};
use p2p_market::qp::SolveOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gap(a: &ClearingResult, b: &ClearingResult) -> f64 {
    (a.social_welfare - b.social_welfare).abs() / b.social_welfare.abs().max(1.0)
}

#[test]
fn full_p2p_agrees_with_central_clearing() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..=12);
        let inst = common::random_market(&mut rng, n, seed % 2 == 0, 0, 0.0, 0.0, 0.0);
        let central = clear_full_p2p(&inst, &SolveOptions::default()).unwrap();
        let (r, trace) = negotiate_full_p2p(&inst, &NegotiationConfig::default()).unwrap();
        assert!(
            gap(&r, &central) <= 1e-4,
            "seed {seed}: {} vs {}",
            r.social_welfare,
            central.social_welfare
        );
        let (a, b) = (r.trades.unwrap(), central.trades.unwrap());
        let dev = a
            .pairs()
            .iter()
            .zip(b.pairs())
            .map(|(p, q)| (p.mw - q.mw).abs())
            .fold(0.0, f64::max);
        assert!(
            dev <= 1e-3,
            "seed {seed}: deviation {dev}, tie-break {}",
            trace.tie_break_applied
        );
    }
}

#[test]
fn messages_follow_the_partner_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = common::random_market(&mut rng, 8, true, 0, 0.001, 0.0, 0.0);
    let (_, trace) = negotiate_full_p2p(&inst, &NegotiationConfig::default()).unwrap();
    for round in &trace.rounds {
        for (n, (&s, &r)) in round.sent.iter().zip(&round.received).enumerate() {
            let degree = inst.partner_graph().partners(n).len();
            assert_eq!((s, r), (degree, degree));
        }
    }
}

#[test]
fn residuals_do_not_blow_up() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inst = common::random_market(&mut rng, 14, true, 0, 0.001, 0.0, 0.0);
        let (_, trace) = negotiate_full_p2p(&inst, &NegotiationConfig::default()).unwrap();
        let r: Vec<f64> = trace.rounds.iter().map(|r| r.primal_residual).collect();
        let window_max = |i: usize| r[i..(i + 100).min(r.len())].iter().copied().fold(0.0, f64::max);
        for i in 0..r.len().saturating_sub(100) {
            assert!(window_max(i + 100) <= 10.0 * window_max(i), "seed {seed} round {i}");
        }
    }
}

#[test]
fn community_agrees_with_central_clearing() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=12);
        let fee = if seed % 3 == 0 { 0.0 } else { 0.001 };
        let inst = common::random_market(&mut rng, n, true, 1, 0.0, fee, 0.0);
        let spec = &inst.communities()[0];
        let central = clear_community(&inst, spec, &SolveOptions::default()).unwrap();
        let (r, trace) = negotiate_community(&inst, spec, &NegotiationConfig::default()).unwrap();
        assert!(
            gap(&r, &central) <= 1e-4,
            "seed {seed}: {} vs {}",
            r.social_welfare,
            central.social_welfare
        );
        let (a, b) = (&r.community_decisions[0], &central.community_decisions[0]);
        for (x, y) in a.members.iter().zip(&b.members) {
            let dev = (x.q - y.q).abs().max((x.p - y.p).abs());
            assert!(
                dev <= 1e-3,
                "seed {seed}: {x:?} vs {y:?}, tie-break {}",
                trace.tie_break_applied
            );
        }
    }
}

#[test]
fn trace_csv_has_one_line_per_round() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inst = common::random_market(&mut rng, 6, false, 0, 0.0, 0.0, 0.0);
    let (_, trace) = negotiate_full_p2p(&inst, &NegotiationConfig::default()).unwrap();
    let csv = trace.to_csv();
    assert!(csv.starts_with("round,primal_residual,dual_residual,objective,messages\n"));
    assert_eq!(csv.lines().count(), trace.total_rounds() + 1);
}

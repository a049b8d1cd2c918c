mod common;

use p2p_market::qp::{check_kkt, solve, QpProblem, SolveOptions, Status, VarSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn strictly_convex(seed: u64) -> QpProblem {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = QpProblem::new();
    for _ in 0..6 {
        p.add_var(
            VarSpec::free()
                .quad(rng.gen_range(0.2..2.0))
                .lin(rng.gen_range(-5.0..5.0))
                .bounds(-3.0, 3.0),
        );
    }
    p.add_equality([(0, 1.0), (1, 1.0), (2, -1.0)], 0.5);
    p.add_equality([(3, 2.0), (4, -1.0), (5, 1.0)], -1.0);
    p.add_equality([(1, 1.0), (4, 1.0)], 0.0);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grid_search_never_beats_the_solver(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::small_qp(&mut rng);
        let s = solve(&p, &SolveOptions::default()).unwrap();
        prop_assert_eq!(s.status, Status::Optimal);
        prop_assert!(s.kkt.max() <= 1e-6);
        if let Some(best) = common::grid_minimum(&p) {
            prop_assert!(best >= s.objective_value - 1e-5, "grid {} solver {}", best, s.objective_value);
        }
    }
}

#[test]
fn negating_a_row_negates_its_dual() {
    for seed in 0..10 {
        let p = strictly_convex(seed);
        let base = solve(&p, &SolveOptions::default()).unwrap();
        for r in 0..p.num_rows() {
            let mut flipped = p.clone();
            flipped.negate_row(r);
            let s = solve(&flipped, &SolveOptions::default()).unwrap();
            for (i, (a, b)) in base.duals.iter().zip(&s.duals).enumerate() {
                let expected = if i == r { -a } else { *a };
                assert!((expected - b).abs() <= 1e-9, "seed {seed} row {r}: {expected} vs {b}");
            }
        }
    }
}

#[test]
fn scaling_the_objective_scales_the_duals() {
    for seed in 0..10 {
        let p = strictly_convex(seed);
        let base = solve(&p, &SolveOptions::default()).unwrap();
        for k in [0.1, 3.0, 250.0] {
            let mut scaled = p.clone();
            scaled.scale_objective(k);
            let s = solve(&scaled, &SolveOptions::default()).unwrap();
            for (a, b) in base.x.iter().zip(&s.x) {
                assert!((a - b).abs() <= 1e-6, "seed {seed} k {k}: x {a} vs {b}");
            }
            for (a, b) in base.duals.iter().zip(&s.duals) {
                assert!(
                    (k * a - b).abs() <= 1e-6 * (k * a).abs().max(1.0),
                    "seed {seed} k {k}: dual {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn returned_points_certify_themselves() {
    let p = strictly_convex(7);
    let s = solve(&p, &SolveOptions::default()).unwrap();
    let r = check_kkt(&p, &s.x, &s.duals).unwrap();
    assert_eq!(r, s.kkt);
}

use crowdfm_core::bernstein::{fit_coeffs, BasisMatrix, TrajectoryCoeffs};
use crowdfm_core::eval::hlp;
use crowdfm_core::guidance::{collision_cost, CostConfig, Obstacles};
use crowdfm_core::scorer::scorer_loss;
use proptest::prelude::*;

fn coeffs(order: usize) -> impl Strategy<Value = TrajectoryCoeffs> {
    (
        prop::collection::vec(-5.0..5.0f64, order + 1),
        prop::collection::vec(-5.0..5.0f64, order + 1),
    )
        .prop_map(|(cx, cy)| TrajectoryCoeffs::new(cx, cy).unwrap())
}

fn path(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y)| [x, y]), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_rows_sum_to_one(order in 1usize..14, n in 16usize..60, dt in 0.02..0.3f64) {
        let b = BasisMatrix::uniform(order, n, dt).unwrap();
        for i in 0..n {
            let s: f64 = b.p_row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(b.p_row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn positions_stay_in_the_control_hull_box(c in coeffs(10)) {
        let b = BasisMatrix::canonical();
        let (lo_x, hi_x) = c.cx.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        let (lo_y, hi_y) = c.cy.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        for p in b.positions(&c) {
            prop_assert!(p[0] >= lo_x - 1e-12 && p[0] <= hi_x + 1e-12);
            prop_assert!(p[1] >= lo_y - 1e-12 && p[1] <= hi_y + 1e-12);
        }
        let pos = b.positions(&c);
        prop_assert!((pos[0][0] - c.cx[0]).abs() < 1e-12);
        prop_assert!((pos[49][1] - c.cy[10]).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_its_own_curve(c in coeffs(10)) {
        let b = BasisMatrix::canonical();
        let fit = fit_coeffs(&b.positions(&c), &b).unwrap();
        for (a, e) in fit.coeffs.to_flat().iter().zip(c.to_flat()) {
            prop_assert!((a - e).abs() < 1e-8, "{a} vs {e}");
        }
    }

    #[test]
    fn collision_cost_is_translation_invariant(
        c in coeffs(10),
        pts in path(6),
        dx in -20.0..20.0f64,
        dy in -20.0..20.0f64,
    ) {
        let b = BasisMatrix::canonical();
        let obs = Obstacles { points: pts, dynamic: vec![[1.0, 0.5, -0.3, 0.2]] };
        let cfg = CostConfig::default();
        let base = collision_cost(&c, &b, &obs, &cfg);
        let moved = collision_cost(&c.translated(dx, dy), &b, &obs.translated(dx, dy), &cfg);
        prop_assert!(base >= 0.0);
        prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base), "{base} vs {moved}");
    }

    #[test]
    fn distant_obstacles_cost_nothing(c in coeffs(10), pts in path(4)) {
        let b = BasisMatrix::canonical();
        let far: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + 100.0, p[1]]).collect();
        let obs = Obstacles { points: far, dynamic: vec![] };
        prop_assert_eq!(collision_cost(&c, &b, &obs, &CostConfig::default()), 0.0);
    }

    #[test]
    fn hlp_is_a_symmetric_shift_invariant_mean(a in path(20), b in path(20), dx in -5.0..5.0f64) {
        let ab = hlp(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - hlp(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(hlp(&a, &a).unwrap(), 0.0);
        let sa: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + dx, p[1]]).collect();
        let sb: Vec<[f64; 2]> = b.iter().map(|p| [p[0] + dx, p[1]]).collect();
        prop_assert!((hlp(&sa, &sb).unwrap() - ab).abs() < 1e-9);
    }

    #[test]
    fn uniform_scores_give_log_k(k in 2usize..40, s in -50.0..50.0f64, j in 0usize..40) {
        let ce = scorer_loss(&vec![s; k], j % k, &vec![0.0; k], 0.0).unwrap();
        prop_assert!((ce - (k as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn hlp_rejects_mismatched_lengths() {
    assert!(hlp(&[[0.0, 0.0]], &[[0.0, 0.0], [1.0, 1.0]]).is_err());
    assert!(hlp(&[], &[]).is_err());
}

use std::sync::Arc;

use ersatz_core::estimates::*;
use ersatz_core::grid::{build_grid, Domain};
use ersatz_core::reference::*;
use ersatz_core::solver::{solve, StorePolicy};
use ersatz_core::stencil::build_standard_stencil;
use proptest::prelude::*;

proptest! {
    #[test]
    fn interpolation_holds(r in 2i64..12, w in prop::collection::vec(-100.0f64..100.0, 27)) {
        let w = &w[..(2 * r + 3) as usize];
        let c = interpolation_inequality_check(w, r).unwrap();
        prop_assert!(c.pass, "{c:?}");
    }

    #[test]
    fn interpolation_holds_on_smooth_sequences(r in 2i64..12, a in -5.0f64..5.0, f in 0.0f64..3.0, p in 0.0f64..6.3) {
        let w: Vec<f64> = (-r - 1..=r + 1).map(|i| a * (f * i as f64 + p).sin()).collect();
        prop_assert!(interpolation_inequality_check(&w, r).unwrap().pass);
    }

    #[test]
    fn max_principle_holds(
        a in prop::collection::vec(0.0f64..2.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 2),
        c in -1.0f64..1.0,
        eta_amp in -1.0f64..1.0,
        bdry in -1.0f64..1.0,
    ) {
        let s = build_standard_stencil(2).unwrap();
        let h = 0.125;
        let grid = Arc::new(build_grid(Domain::Box { lower: vec![0.0; 2], upper: vec![1.0; 2] }, &s, h).unwrap());
        // keep h·b⁻ ≤ a on the axis directions
        let b: Vec<f64> = b.iter().zip(&a).map(|(bk, ak)| bk.max(-ak / h)).collect();
        let p = LinearProblem {
            grid,
            a,
            b,
            c,
            eta: Arc::new(move |t, x| eta_amp * (3.0 * x[0] - x[1] + t).cos()),
            boundary: Arc::new(move |t, x| bdry * (x[0] + 2.0 * x[1]).sin() + t),
            horizon: 0.1,
        };
        let r = max_principle_check(&p).unwrap();
        prop_assert!(r.pass(), "{r:?}");
    }
}

#[test]
fn quadratic_estimates_match_closed_forms() {
    let h = 1.0 / 32.0;
    let cfg = heat_quadratic(h, 100.0).unwrap();
    let (_, report) = solve_and_measure(&cfg, EstimateOptions::default()).unwrap();
    assert!(report.boundary_wedge_constant.unwrap() <= 1e-12);
    assert_eq!(report.active_set_fraction, 0.0);
    assert!((report.time_diff_sup - 4.0).abs() <= 1e-9);
    // second differences of |x|² are 2|l|², largest on the diagonals
    let cut = 6.0 * 2f64.sqrt() * h;
    let grid = &cfg.grid;
    let sup_weight = grid.interior().iter().map(|&n| (grid.rho(n) - cut).max(0.0)).fold(0.0, f64::max);
    let weighted = report.weighted_second_diff_sup.unwrap();
    assert!((weighted - 4.0 * sup_weight).abs() <= 1e-9, "{weighted} vs {}", 4.0 * sup_weight);
    assert!(report.global_second_diff_sup.is_none());
}

#[test]
fn streaming_and_replayed_measurements_agree() {
    let cfg = isaacs(1.0 / 16.0, 2.0).unwrap();
    let traj = solve(&cfg).unwrap();
    let replayed = measure(&traj, &cfg, EstimateOptions::default()).unwrap();
    let (_, streamed) = solve_and_measure(&cfg, EstimateOptions::default()).unwrap();
    assert_eq!(replayed, streamed);
    let partial = solve(&cfg.clone().with_store(StorePolicy::FinalWithProbes(vec![]))).unwrap();
    assert!(measure(&partial, &cfg, EstimateOptions::default()).is_err());
}

#[test]
fn torus_reports_global_second_differences() {
    let cfg = torus_sine(1.0 / 32.0).unwrap();
    let (_, report) = solve_and_measure(&cfg, EstimateOptions::default()).unwrap();
    assert!(report.boundary_wedge_constant.is_none());
    assert!(report.weighted_second_diff_sup.is_none());
    // |Δ sin(2πx)| ≤ 4π² at t = T
    let g = report.global_second_diff_sup.unwrap();
    assert!(g <= 4.0 * std::f64::consts::PI.powi(2) + 1e-9 && g > 30.0, "{g}");
}

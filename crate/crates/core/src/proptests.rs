//! Invariants checked over random grids, states and survey profiles.

use crate::controller::{controller_storage, project_box, ConstraintMode, ControllerGains, ControllerState};
use crate::network::{algebraic_connectivity, GridTopology};
use crate::oracle::random_grid;
use crate::plant::{GridInput, GridState};
use crate::psychosocial::{
    default_appliances, flexibility_level, pi_u_total, tune_pi_u, FlexibilitySpread, ValueProfile,
    NON_ADOPTER_PI_U,
};
use crate::sim::{draw_parameters, ClosedLoop, ClosedLoopState, ParameterRanges, StateLayout};
use crate::welfare::ideal_welfare_optimum;
use nalgebra::DVector;
use proptest::prelude::*;

fn connected_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<f64>)> {
    (3usize..9)
        .prop_flat_map(|n| {
            let chords = prop::collection::vec((0..n, 0..n), 0..4);
            (Just(n), chords, any::<bool>())
        })
        .prop_flat_map(|(n, chords, reverse)| {
            let mut edges: Vec<(usize, usize)> = (0..n - 1)
                .map(|i| if reverse { (i + 1, i) } else { (i, i + 1) })
                .collect();
            for (a, b) in chords {
                let duplicate = edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a));
                if a != b && !duplicate {
                    edges.push((a, b));
                }
            }
            let m = edges.len();
            (Just(n), Just(edges), prop::collection::vec(0.01f64..1.0, m))
        })
}

fn dvec(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, n).prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_is_symmetric_psd_with_zero_row_sums((n, edges, r) in connected_graph()) {
        let topo = GridTopology::new(n, edges).unwrap();
        let lap = topo.weighted_laplacian(&r).unwrap();
        for i in 0..n {
            prop_assert!(lap.row(i).sum().abs() < 1e-9);
            for j in 0..n {
                prop_assert!((lap[(i, j)] - lap[(j, i)]).abs() < 1e-12);
            }
        }
        let eig = lap.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.min() > -1e-9);
        prop_assert!(algebraic_connectivity(&lap) > 0.0);
    }

    #[test]
    fn laplacian_ignores_edge_orientation((n, edges, r) in connected_graph(), pick in any::<prop::sample::Index>()) {
        let topo = GridTopology::new(n, edges).unwrap();
        let flipped = topo.with_flipped_edge(pick.index(topo.m()));
        let a = topo.weighted_laplacian(&r).unwrap();
        let b = flipped.weighted_laplacian(&r).unwrap();
        prop_assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn plant_steady_state_solves_the_balance(
        seed in 0u64..10_000,
        n in 3usize..8,
        offsets in prop::collection::vec(-5.0f64..5.0, 8),
        loads in prop::collection::vec(-0.5f64..1.5, 8),
    ) {
        let grid = random_grid(seed, n).unwrap();
        let input = GridInput {
            u_s: DVector::from_iterator(n, offsets.iter().take(n).map(|d| 380.0 + d)),
            u_l: DVector::from_iterator(n, loads.iter().take(n).copied()),
        };
        let state = grid.steady_state(&input).unwrap();
        prop_assert!(grid.steady_state_residual(&state, &input).unwrap() < 1e-10);
        let rate = grid.grid_derivative(&state, &input).unwrap();
        prop_assert!(grid.storage_value(&rate) < 1e-12);
    }

    #[test]
    fn plant_storage_is_nonnegative(seed in 0u64..10_000, n in 3usize..8, scale in 0.0f64..1e3) {
        let grid = random_grid(seed, n).unwrap();
        let m = grid.m();
        let rate = GridState {
            i_s: DVector::from_element(n, scale),
            i: DVector::from_element(m, -scale),
            v: DVector::from_element(n, 0.5 * scale),
        };
        prop_assert!(grid.storage_value(&rate) >= 0.0);
    }

    #[test]
    fn ideal_optimum_balances_and_shares_by_capacity(
        i_l in prop::collection::vec(1.0f64..20.0, 2..10),
        raw_c in prop::collection::vec(0.1f64..1.0, 10),
        raw_u in prop::collection::vec(0.0f64..2.0, 10),
    ) {
        let n = i_l.len();
        let total_c: f64 = raw_c[..n].iter().sum();
        let pi_c: Vec<f64> = raw_c[..n].iter().map(|c| c / total_c).collect();
        let sol = ideal_welfare_optimum(&i_l, &pi_c, &raw_u[..n]).unwrap();
        let supplied = sol.i_s_opt.sum();
        let consumed: f64 = i_l.iter().zip(sol.u_l_opt.iter()).map(|(d, u)| d * u).sum();
        prop_assert!((supplied - consumed).abs() < 1e-9 * supplied.abs().max(1.0));
        for i in 0..n {
            prop_assert!((sol.i_s_opt[i] / pi_c[i] - sol.lambda_opt).abs() < 1e-9 * sol.lambda_opt.max(1.0));
        }
    }

    #[test]
    fn flexibility_level_stays_within_the_adoption_share(
        stv in -6.0f64..6.0,
        sev in -6.0f64..6.0,
        psi in 0.0f64..=1.0,
    ) {
        let est = flexibility_level(&default_appliances(), &ValueProfile::new(stv, sev), psi).unwrap();
        prop_assert!(est.lambda >= 0.0);
        prop_assert!(est.lambda <= psi + 1e-12);
        prop_assert!(est.rho.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn tuned_flexibility_sums_to_the_target(
        lambda in 0.05f64..0.9,
        adopters in prop::collection::vec(any::<bool>(), 2..12),
        seed in any::<u64>(),
    ) {
        prop_assume!(adopters.iter().any(|&a| a));
        let pi_u = tune_pi_u(lambda, &adopters, &FlexibilitySpread::default(), seed).unwrap();
        let target = pi_u_total(lambda).unwrap();
        prop_assert!((pi_u.iter().sum::<f64>() - target).abs() < 1e-12 * target.max(1.0));
        for (p, &a) in pi_u.iter().zip(&adopters) {
            prop_assert!(*p > 0.0);
            if !a {
                prop_assert_eq!(*p, NON_ADOPTER_PI_U);
            }
        }
        prop_assert_eq!(&pi_u, &tune_pi_u(lambda, &adopters, &FlexibilitySpread::default(), seed).unwrap());
    }

    #[test]
    fn box_projection_only_removes_outward_motion(
        seed in 0u64..10_000,
        state in dvec(32, -1.0, 2.0),
        rate in dvec(32, -1.0, 1.0),
    ) {
        let grid = random_grid(seed, 4).unwrap();
        let c = ControllerState::from_vector(&state, 4).unwrap();
        let r = ControllerState::from_vector(&rate, 4).unwrap();
        let p = project_box(&grid, ConstraintMode::FULL, &c, &r);
        for (pb, rb) in p.blocks().iter().zip(r.blocks()) {
            for (x, y) in pb.iter().zip(rb.iter()) {
                prop_assert!(*x == *y || *x == 0.0);
            }
        }
        for (i, q) in grid.prosumers().iter().enumerate() {
            if c.u_l[i] <= q.u_l_min {
                prop_assert!(p.u_l[i] >= 0.0);
            }
            if c.u_l[i] >= 1.0 {
                prop_assert!(p.u_l[i] <= 0.0);
            }
            if c.eta_lo[i] <= 0.0 {
                prop_assert!(p.eta_lo[i] >= 0.0);
            }
            if c.eta_hi[i] <= 0.0 {
                prop_assert!(p.eta_hi[i] >= 0.0);
            }
        }
        let same = project_box(&grid, ConstraintMode::UNCONSTRAINED, &c, &r);
        prop_assert_eq!(same, r);
    }

    #[test]
    fn controller_storage_is_nonnegative(rate in dvec(24, -1e3, 1e3), tau in 0.01f64..10.0) {
        let r = ControllerState::from_vector(&rate, 3).unwrap();
        let unit = controller_storage(&r, &ControllerGains::default());
        let gains = ControllerGains {
            tau_s: tau,
            tau_l: tau,
            tau_i: tau,
            tau_v: tau,
            tau_a: tau,
            tau_b: tau,
            tau_eta: tau,
            ..ControllerGains::default()
        };
        prop_assert!(unit >= 0.0);
        prop_assert!((controller_storage(&r, &gains) - tau * unit).abs() <= 1e-9 * unit.max(1.0) * tau);
    }

    #[test]
    fn draws_are_in_range_and_repeatable(seed in any::<u64>(), n in 1usize..12, m in 1usize..12) {
        let ranges = ParameterRanges::default();
        let a = draw_parameters(&ranges, n, m, seed).unwrap();
        prop_assert_eq!(&a, &draw_parameters(&ranges, n, m, seed).unwrap());
        for (v, iv) in [(&a.r_s, ranges.r_s), (&a.l_s, ranges.l_s), (&a.c, ranges.c), (&a.i_l, ranges.i_l)] {
            prop_assert_eq!(v.len(), n);
            prop_assert!(v.iter().all(|x| (iv.lo..=iv.hi).contains(x)));
        }
        prop_assert_eq!(a.lines.len(), m);
        for line in &a.lines {
            prop_assert!((ranges.r_line.lo..=ranges.r_line.hi).contains(&line.r));
            prop_assert!((ranges.l_line.lo..=ranges.l_line.hi).contains(&line.l));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn closed_loop_state_round_trips(seed in 0u64..10_000, x in dvec(64, -400.0, 400.0)) {
        let grid = random_grid(seed, 4).unwrap();
        let layout = StateLayout { n: 4, m: grid.m() };
        let x = x.rows(0, layout.dim()).into_owned();
        let state = ClosedLoopState::from_vector(&x, layout).unwrap();
        prop_assert_eq!(state.to_vector(), x.clone());
        let cl = ClosedLoop::new(&grid, &ControllerGains::default(), ConstraintMode::FULL).unwrap();
        let back = cl.from_internal(&cl.to_internal(&state)).unwrap();
        prop_assert!((back.to_vector() - x).amax() < 1e-9);
    }
}

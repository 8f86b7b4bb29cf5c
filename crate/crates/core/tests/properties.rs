use std::sync::Arc;

use delaymp::absde::{picard_solve, Init, LinearAdvancedDriver, Mode, Schedule, SolverSettings};
use delaymp::adjoint::solve_first_adjoint;
use delaymp::forward::{simulate_ensemble, ControlSpec};
use delaymp::model::{linear_quadratic, make_grid, ControlSet, InitialSegment, JumpModel, LqParams, MarkDistribution, ProblemSpec};
use delaymp::objective::{compare_controls, estimate_j};
use proptest::prelude::*;

fn lq_spec(delta: f64, rho: f64, p: &LqParams, jumps: bool) -> ProblemSpec {
    let spec = ProblemSpec::new(
        delta,
        rho,
        Arc::new(linear_quadratic(p)),
        ControlSet::unbounded(),
        InitialSegment::Linear { at_zero: 1.0, slope: -0.3 },
    )
    .unwrap();
    if jumps {
        spec.with_jump(Some(JumpModel::new(1.5, MarkDistribution::Uniform { lo: -0.2, hi: 0.3 }).unwrap()))
    } else {
        spec
    }
}

fn trapezoid_average(ext: &[f64], k: usize, m: usize, rho: f64, dt: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..=m {
        let w = if i == 0 || i == m { 0.5 } else { 1.0 };
        s += w * (-rho * (m - i) as f64 * dt).exp() * ext[k + i];
    }
    s * dt
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn moving_average_matches_direct_sum(
        m in 1usize..12,
        dt in 0.01f64..0.1,
        rho in 0.0f64..2.0,
        bx in -0.5f64..0.5,
        sx in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let delta = m as f64 * dt;
        let p = LqParams { bx, by: 0.2, ba: -0.1, s0: 0.1, sx, jx: 0.5, ..Default::default() };
        let spec = lq_spec(delta, rho, &p, true);
        let grid = make_grid(delta, dt, 20.0 * dt).unwrap();
        let ens = simulate_ensemble(&spec, &grid, &ControlSpec::Constant(0.1), 3, seed).unwrap();
        for rec in &ens.paths {
            let ext = rec.extended_x(&ens.segment);
            let scale = ext.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            for k in 0..=grid.n {
                prop_assert_eq!(rec.y[k].to_bits(), ext[k].to_bits());
                let oracle = trapezoid_average(&ext, k, grid.m, rho, dt);
                prop_assert!((rec.a[k] - oracle).abs() <= 1e-12 * scale * (1.0 + delta));
            }
        }
    }

    #[test]
    fn same_seed_same_paths(seed in any::<u64>(), u in -1.0f64..1.0) {
        let p = LqParams { bx: 0.1, bu: 1.0, sx: 0.3, jx: 1.0, ..Default::default() };
        let spec = lq_spec(0.2, 0.5, &p, true);
        let grid = make_grid(0.2, 0.05, 1.0).unwrap();
        let a = simulate_ensemble(&spec, &grid, &ControlSpec::Constant(u), 4, seed).unwrap();
        let b = simulate_ensemble(&spec, &grid, &ControlSpec::Constant(u), 4, seed).unwrap();
        for (x, y) in a.paths.iter().zip(&b.paths) {
            prop_assert_eq!(&x.x, &y.x);
            prop_assert_eq!(&x.a, &y.a);
        }
    }

    #[test]
    fn paired_difference_is_antisymmetric(seed in 0u64..1000, u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let p = LqParams { bx: 0.1, bu: 1.0, sx: 0.3, qx: 1.0, ru: 1.0, ..Default::default() };
        let spec = lq_spec(0.2, 0.5, &p, false);
        let grid = make_grid(0.2, 0.05, 1.0).unwrap();
        let (a, b) = (ControlSpec::Constant(u), ControlSpec::Constant(v));
        let d1 = compare_controls(&spec, &grid, &a, &b, 16, seed).unwrap();
        let d2 = compare_controls(&spec, &grid, &b, &a, 16, seed).unwrap();
        prop_assert!((d1.mean + d2.mean).abs() <= 1e-12 * (1.0 + d1.mean.abs()));
        prop_assert!((d1.stderr - d2.stderr).abs() <= 1e-12 * (1.0 + d1.stderr));
    }

    #[test]
    fn picard_is_independent_of_the_start(c2 in -0.5f64..0.5, c1 in -0.5f64..0.5, seed in any::<u64>()) {
        let grid = make_grid(1.0, 0.01, 3.0).unwrap();
        let d = LinearAdvancedDriver { c1, c2, g: |t: f64| (-t).exp() };
        let settings = SolverSettings { schedule: Schedule::Picard, ..Default::default() };
        let (a, _) = picard_solve(&d, &grid, &settings, None, &Init::Zero).unwrap();
        let (b, _) = picard_solve(&d, &grid, &settings, None, &Init::Random { seed, scale: 5.0 }).unwrap();
        for k in 0..=grid.n {
            prop_assert!((a.p(0, k, 0) - b.p(0, k, 0)).abs() <= 1e-10);
        }
    }
}

/// The backward sweep integrates p' = c p + g with p(T) = 0 to second order.
#[test]
fn sweep_is_second_order_without_delay_coupling() {
    let exact = |t: f64| (-(3.0 - t) * 0.4f64).exp_m1() / 0.4;
    let mut errs = Vec::new();
    for dt in [0.02, 0.01] {
        let grid = make_grid(1.0, dt, 3.0).unwrap();
        let d = LinearAdvancedDriver { c1: 0.4, c2: 0.0, g: |_| 1.0 };
        let (a, _) = picard_solve(&d, &grid, &SolverSettings::default(), None, &Init::Zero).unwrap();
        let e = (0..=grid.n).map(|k| (a.p(0, k, 0) - exact(grid.t(k))).abs()).fold(0.0, f64::max);
        errs.push(e);
    }
    let order = (errs[0] / errs[1]).log2();
    assert!(order > 1.8, "order {order}, errors {errs:?}");
}

/// Regression-mode Picard on a stochastic problem reaches the round-off
/// floor of the weighted norm and stops there instead of reporting a bad weight.
#[test]
fn regression_picard_stops_at_roundoff() {
    let p = LqParams { bx: 0.1, by: 0.2, ba: 0.1, bu: 1.0, s0: 0.2, sx: 0.1, jx: 1.0, qx: 1.0, ru: 1.0, lx: 0.5, kappa: 0.1, ..Default::default() };
    let spec = lq_spec(0.5, 0.5, &p, true);
    let grid = make_grid(0.5, 0.05, 5.0).unwrap();
    let ens = simulate_ensemble(&spec, &grid, &ControlSpec::Constant(0.2), 300, 3).unwrap();
    let settings = SolverSettings { mode: Mode::Regression, schedule: Schedule::Picard, tol: 1e-14, max_iter: 60, ..Default::default() };
    let (_, rep) = solve_first_adjoint(&spec, &ens, &settings).unwrap();
    assert!(rep.converged);
    let first = rep.distances[0];
    assert!(*rep.distances.last().unwrap() <= 1e-16 * first);
}

#[test]
fn objective_of_zero_reward_is_zero() {
    let spec = lq_spec(0.2, 0.5, &LqParams { bx: 0.1, sx: 0.2, ..Default::default() }, true);
    let grid = make_grid(0.2, 0.05, 1.0).unwrap();
    let e = estimate_j(&spec, &grid, &ControlSpec::Constant(0.3), 20, 1).unwrap();
    assert_eq!(e.mean, 0.0);
    assert_eq!(e.stderr, 0.0);
}

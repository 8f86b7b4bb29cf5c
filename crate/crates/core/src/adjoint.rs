//! Adjoint drivers of the two maximum principles, solved with [`crate::absde`].
//!
//! The Hamiltonian partials are affine in (p, q, r), so the coefficient
//! partials along each reference path are computed once and reused by every
//! Picard sweep.

use rayon::prelude::*;

use crate::absde::{picard_solve, AdjointTriple, AdvancedDriver, DriverCtx, Init, McContext, PicardReport, SolverSettings};
use crate::error::Result;
use crate::forward::Ensemble;
use crate::model::{ProblemSpec, TimeGrid};

/// Coefficient partials along the ensemble: (f, b, sigma) by (x, y, a), and
/// per-atom jump weights `int_cell d theta nu(dz)` by (x, y, a).
#[derive(Debug, Clone)]
pub struct PathPartials {
    paths: usize,
    n: usize,
    n_atoms: usize,
    coef: Vec<[f64; 9]>,
    jump: Vec<f64>,
}

const F: usize = 0;
const B: usize = 3;
const S: usize = 6;

impl PathPartials {
    pub fn new(spec: &ProblemSpec, ensemble: &Ensemble) -> Self {
        let grid = &ensemble.grid;
        let paths = ensemble.len();
        let n = grid.n;
        let n_atoms = spec.n_atoms();
        let per_path: Vec<(Vec<[f64; 9]>, Vec<f64>)> = ensemble
            .paths
            .par_iter()
            .map(|rec| {
                let stop = rec.last_valid();
                let mut coef = vec![[0.0; 9]; n + 1];
                let mut jump = vec![0.0; (n + 1) * 3 * n_atoms];
                for k in 0..=stop.min(n) {
                    let pt = rec.point(k);
                    let c = &spec.coeffs;
                    let (f, b, s) = (c.reward_grad(&pt), c.drift_grad(&pt), c.diffusion_grad(&pt));
                    coef[k] = [f.x, f.y, f.a, b.x, b.y, b.a, s.x, s.y, s.a];
                    if n_atoms > 0 {
                        let jm = spec.jump.as_ref().expect("atoms imply jumps");
                        let w = &mut jump[k * 3 * n_atoms..(k + 1) * 3 * n_atoms];
                        for node in jm.nodes() {
                            let g = c.jump_grad(&pt, node.z);
                            let nu = jm.intensity * node.w;
                            w[node.atom] += nu * g.x;
                            w[n_atoms + node.atom] += nu * g.y;
                            w[2 * n_atoms + node.atom] += nu * g.a;
                        }
                    }
                }
                (coef, jump)
            })
            .collect();
        let mut coef = vec![[0.0; 9]; (n + 1) * paths];
        let mut jump = vec![0.0; (n + 1) * paths * 3 * n_atoms];
        for (j, (c, w)) in per_path.into_iter().enumerate() {
            for k in 0..=n {
                coef[k * paths + j] = c[k];
                let dst = (k * paths + j) * 3 * n_atoms;
                jump[dst..dst + 3 * n_atoms].copy_from_slice(&w[k * 3 * n_atoms..(k + 1) * 3 * n_atoms]);
            }
        }
        Self { paths, n, n_atoms, coef, jump }
    }

    #[inline]
    fn coef(&self, k: usize, j: usize) -> &[f64; 9] {
        &self.coef[k * self.paths + j]
    }

    /// Jump weights of variable `v` (0 = x, 1 = y, 2 = a).
    #[inline]
    fn weights(&self, k: usize, j: usize, v: usize) -> &[f64] {
        let base = (k * self.paths + j) * 3 * self.n_atoms + v * self.n_atoms;
        &self.jump[base..base + self.n_atoms]
    }

    /// `dH/dv = f_v + b_v p + sigma_v q + sum_i W_v,i r_i` at (k, j); zero past the horizon.
    #[inline]
    fn h_partial(&self, k: usize, j: usize, v: usize, p: f64, q: f64, r: impl Fn(usize) -> f64) -> f64 {
        if k > self.n {
            return 0.0;
        }
        let c = self.coef(k, j);
        let mut h = c[F + v] + c[B + v] * p + c[S + v] * q;
        for (i, w) in self.weights(k, j, v).iter().enumerate() {
            h += w * r(i);
        }
        h
    }

    fn max_abs(&self, v: usize) -> f64 {
        let mut m = 0.0f64;
        for (idx, c) in self.coef.iter().enumerate() {
            let w: f64 = self.jump[idx * 3 * self.n_atoms + v * self.n_atoms..][..self.n_atoms].iter().map(|x| x.abs()).sum();
            m = m.max(c[B + v].abs() + c[S + v].abs() + w);
        }
        m
    }

    fn stochastic(&self) -> bool {
        self.coef.iter().any(|c| c[S] != 0.0 || c[S + 1] != 0.0 || c[S + 2] != 0.0) || self.jump.iter().any(|w| *w != 0.0)
    }
}

/// `mu(t) = -H_x(t) - H_y(t + delta) - e^{rho t} int_t^{t+delta} H_a(s) e^{-rho s} ds`.
pub struct FirstAdjointDriver<'a> {
    partials: &'a PathPartials,
    grid: TimeGrid,
    rho: f64,
    lipschitz: f64,
    stochastic: bool,
}

impl<'a> FirstAdjointDriver<'a> {
    pub fn new(spec: &ProblemSpec, grid: &TimeGrid, partials: &'a PathPartials) -> Self {
        let lipschitz = partials.max_abs(0) + partials.max_abs(1) + spec.delta * partials.max_abs(2);
        Self { partials, grid: *grid, rho: spec.rho, lipschitz, stochastic: partials.stochastic() }
    }

    fn h_at(&self, ctx: &DriverCtx<'_>, v: usize, ahead: usize) -> f64 {
        self.partials
            .h_partial(ctx.k + ahead, ctx.path, v, ctx.p_at(0, ahead), ctx.q_at(0, ahead), |i| ctx.r_at(0, i, ahead))
    }
}

impl AdvancedDriver for FirstAdjointDriver<'_> {
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn uses_qr(&self) -> bool {
        self.stochastic
    }

    fn eval(&self, ctx: &DriverCtx<'_>, out: &mut [f64]) {
        let m = self.grid.m;
        let dt = self.grid.dt;
        let hx = self.h_at(ctx, 0, 0);
        let hy = self.h_at(ctx, 1, m);
        // trapezoid over [t, min(t + delta, T)]
        let end = m.min(self.grid.n.saturating_sub(ctx.k));
        let mut integral = 0.0;
        if end > 0 {
            for d in 0..=end {
                let w = if d == 0 || d == end { 0.5 } else { 1.0 };
                integral += w * (-self.rho * d as f64 * dt).exp() * self.h_at(ctx, 2, d);
            }
            integral *= dt;
        }
        out[0] = -hx - hy - integral;
    }
}

/// The three-component system `dp1 = -H_x dt + q1 dB + r dN~`,
/// `dp2 = -H_y dt + q2 dB`, `dp3 = -H_a dt`.
pub struct SecondAdjointDriver<'a> {
    partials: &'a PathPartials,
    lambda_avg: f64,
    decay: f64,
    lipschitz: f64,
    stochastic: bool,
}

impl<'a> SecondAdjointDriver<'a> {
    pub fn new(spec: &ProblemSpec, partials: &'a PathPartials) -> Self {
        let lam = spec.lambda_avg;
        let decay = (-lam * spec.delta).exp();
        let lipschitz = (partials.max_abs(0) + 1.0).max(partials.max_abs(1) + lam).max(partials.max_abs(2) + decay);
        Self { partials, lambda_avg: lam, decay, lipschitz, stochastic: partials.stochastic() }
    }
}

impl AdvancedDriver for SecondAdjointDriver<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn uses_qr(&self) -> bool {
        self.stochastic
    }

    fn has_diffusion(&self, c: usize) -> bool {
        c < 2
    }

    fn has_jumps(&self, c: usize) -> bool {
        c == 0
    }

    fn eval(&self, ctx: &DriverCtx<'_>, out: &mut [f64]) {
        let (k, j) = (ctx.k, ctx.path);
        let p1 = ctx.p_now(0);
        let p2 = ctx.p_now(1);
        let q1 = ctx.q_now(0);
        let r = |i| ctx.r_at(0, i, 0);
        let pp = self.partials;
        out[0] = -(pp.h_partial(k, j, 0, p1, q1, r) + p2);
        out[1] = -(pp.h_partial(k, j, 1, p1, q1, r) - self.lambda_avg * p2);
        out[2] = -(pp.h_partial(k, j, 2, p1, q1, r) - self.decay * p2);
    }
}

fn mc_context<'a>(spec: &'a ProblemSpec, ensemble: &'a Ensemble) -> McContext<'a> {
    McContext { ensemble, jump: spec.jump.as_ref().filter(|_| spec.has_jumps()) }
}

/// Solve the first adjoint along an ensemble simulated under the reference
/// control, on the ensemble's grid.
pub fn solve_first_adjoint(
    spec: &ProblemSpec,
    ensemble: &Ensemble,
    settings: &SolverSettings,
) -> Result<(AdjointTriple, PicardReport)> {
    let partials = PathPartials::new(spec, ensemble);
    let driver = FirstAdjointDriver::new(spec, &ensemble.grid, &partials);
    let mc = mc_context(spec, ensemble);
    picard_solve(&driver, &ensemble.grid, settings, Some(&mc), &Init::Zero)
}

/// Solve the three-component adjoint system; components are (p1, p2, p3).
pub fn solve_second_adjoint(
    spec: &ProblemSpec,
    ensemble: &Ensemble,
    settings: &SolverSettings,
) -> Result<(AdjointTriple, PicardReport)> {
    let partials = PathPartials::new(spec, ensemble);
    let driver = SecondAdjointDriver::new(spec, &partials);
    let mc = mc_context(spec, ensemble);
    picard_solve(&driver, &ensemble.grid, settings, Some(&mc), &Init::Zero)
}

/// Whether `max |p3| <= tol`, with the maximum.
pub fn p3_flatness(p3: &[f64], tol: f64) -> (bool, f64) {
    let dev = p3.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (dev <= tol, dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_ensemble, ControlSpec};
    use crate::model::{linear_quadratic, make_grid, ControlSet, InitialSegment, LqParams, ZeroCoeffs};
    use std::sync::Arc;

    fn solve_lq(p: LqParams, delta: f64, dt: f64, horizon: f64) -> (ProblemSpec, Ensemble) {
        let spec = ProblemSpec::new(
            delta,
            0.5,
            Arc::new(linear_quadratic(&p)),
            ControlSet::unbounded(),
            InitialSegment::Constant(1.0),
        )
        .unwrap();
        let grid = make_grid(delta, dt, horizon).unwrap();
        let ens = simulate_ensemble(&spec, &grid, &ControlSpec::Constant(0.0), 1, 0).unwrap();
        (spec, ens)
    }

    #[test]
    fn zero_problem_has_zero_adjoint() {
        let spec = ProblemSpec::new(1.0, 1.0, Arc::new(ZeroCoeffs), ControlSet::unbounded(), InitialSegment::Constant(1.0))
            .unwrap();
        let grid = make_grid(1.0, 0.1, 5.0).unwrap();
        let ens = simulate_ensemble(&spec, &grid, &ControlSpec::Constant(0.0), 1, 0).unwrap();
        let (a, _) = solve_first_adjoint(&spec, &ens, &SolverSettings::default()).unwrap();
        assert!(a.mean_p(0).iter().all(|v| *v == 0.0));
        let (b, _) = solve_second_adjoint(&spec, &ens, &SolverSettings::default()).unwrap();
        for c in 0..3 {
            assert!(b.mean_p(c).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn no_delay_linear_adjoint() {
        // dX = 0.1 X dt, f = -X: dp = -(-1 + 0.1 p) dt, p(T) = 0
        let (spec, ens) = solve_lq(LqParams { bx: 0.1, lx: -1.0, kappa: 0.0, ..Default::default() }, 0.5, 1e-3, 4.0);
        let (a, _) = solve_first_adjoint(&spec, &ens, &SolverSettings::default()).unwrap();
        for k in (0..=ens.grid.n).step_by(400) {
            let t = ens.grid.t(k);
            let exact = -10.0 * ((0.1 * (4.0 - t)).exp() - 1.0);
            assert!((a.p(0, k, 0) - exact).abs() < 1e-7, "t={t}: {} vs {exact}", a.p(0, k, 0));
        }
        let (b, _) = solve_second_adjoint(&spec, &ens, &SolverSettings::default()).unwrap();
        for k in 0..=ens.grid.n {
            assert!((a.p(0, k, 0) - b.p(0, k, 0)).abs() < 1e-9);
            assert_eq!(b.p(1, k, 0), 0.0);
        }
    }

    #[test]
    fn delayed_drift_moves_to_advanced_term() {
        // dX = 0.2 X(t - delta) dt, f = X: dp = -(1 + 0.2 p(t + delta)) dt
        let (spec, ens) = solve_lq(LqParams { by: 0.2, lx: 1.0, kappa: 0.0, ..Default::default() }, 0.5, 1e-3, 3.0);
        let (a, _) = solve_first_adjoint(&spec, &ens, &SolverSettings::default()).unwrap();
        // on [T - delta, T] the advanced term vanishes
        let k = ens.grid.index_of(2.75);
        assert!((a.p(0, k, 0) - 0.25).abs() < 1e-9);
        // one segment back: p(t) = (3 - t) + 0.2 int_t^{2.5} p(s + 0.5) ds
        let k = ens.grid.index_of(2.0);
        let exact = 1.0 + 0.2 * 0.125;
        assert!((a.p(0, k, 0) - exact).abs() < 1e-6, "{}", a.p(0, k, 0));
    }

    #[test]
    fn flatness() {
        assert_eq!(p3_flatness(&[0.0, 1e-9, -2e-9], 1e-6), (true, 2e-9));
        assert!(!p3_flatness(&[0.0, 1e-3], 1e-6).0);
    }
}

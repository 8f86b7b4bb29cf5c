//! Hamiltonians of the two adjoint formulations and the delay Itô check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{simulate_path, ControlSpec, NoiseStream};
use crate::model::{fd_step, Grad, Point, ProblemSpec, TimeGrid, Var};
use crate::stats::MeanStderr;

/// Arguments of the scalar-adjoint Hamiltonian. `r` holds one value per mark atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamArgs1<'a> {
    pub point: Point,
    pub p: f64,
    pub q: f64,
    pub r: &'a [f64],
}

/// Arguments of the three-adjoint Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamArgs2<'a> {
    pub point: Point,
    pub p: [f64; 3],
    pub q: [f64; 2],
    pub r: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HamArgs<'a> {
    First(HamArgs1<'a>),
    Second(HamArgs2<'a>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    First,
    Second,
}

impl<'a> HamArgs<'a> {
    pub fn point(&self) -> Point {
        match self {
            Self::First(a) => a.point,
            Self::Second(a) => a.point,
        }
    }

    fn with_point(&self, point: Point) -> Self {
        match *self {
            Self::First(a) => Self::First(HamArgs1 { point, ..a }),
            Self::Second(a) => Self::Second(HamArgs2 { point, ..a }),
        }
    }

    fn pqr(&self) -> (f64, f64, &'a [f64]) {
        match *self {
            Self::First(a) => (a.p, a.q, a.r),
            Self::Second(a) => (a.p[0], a.q[0], a.r),
        }
    }
}

fn jump_term(spec: &ProblemSpec, point: &Point, r: &[f64]) -> f64 {
    match &spec.jump {
        Some(j) if spec.coeffs.has_jumps() && !r.is_empty() => {
            j.integrate_with_r(|z| spec.coeffs.jump(point, z), r)
        }
        _ => 0.0,
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("Hamiltonian"))
    }
}

/// `f + b p + sigma q + int theta r nu(dz)`.
pub fn eval_h1(spec: &ProblemSpec, args: &HamArgs1<'_>) -> Result<f64> {
    let c = &spec.coeffs;
    let pt = &args.point;
    finite(c.reward(pt) + c.drift(pt) * args.p + c.diffusion(pt) * args.q + jump_term(spec, pt, args.r))
}

/// `f + b p1 + (x - lambda y - e^{-lambda delta} a) p2 + sigma q1 + int theta r nu(dz)`.
pub fn eval_h2(spec: &ProblemSpec, args: &HamArgs2<'_>) -> Result<f64> {
    let c = &spec.coeffs;
    let pt = &args.point;
    let lam = spec.lambda_avg;
    let avg = pt.x - lam * pt.y - (-lam * spec.delta).exp() * pt.a;
    finite(
        c.reward(pt)
            + c.drift(pt) * args.p[0]
            + avg * args.p[1]
            + c.diffusion(pt) * args.q[0]
            + jump_term(spec, pt, args.r),
    )
}

pub fn eval_h(spec: &ProblemSpec, args: &HamArgs<'_>) -> Result<f64> {
    match args {
        HamArgs::First(a) => eval_h1(spec, a),
        HamArgs::Second(a) => eval_h2(spec, a),
    }
}

/// All four partials of H, by the chain rule over the coefficient partials.
pub fn grad_h_all(spec: &ProblemSpec, args: &HamArgs<'_>) -> Result<Grad> {
    let c = &spec.coeffs;
    let pt = args.point();
    let (p, q, r) = args.pqr();
    let mut g = c.reward_grad(&pt).add(c.drift_grad(&pt).scale(p)).add(c.diffusion_grad(&pt).scale(q));
    if let Some(j) = spec.jump.as_ref().filter(|_| c.has_jumps() && !r.is_empty()) {
        for v in Var::ALL {
            let w = j.integrate_with_r(|z| c.jump_grad(&pt, z).get(v), r);
            match v {
                Var::X => g.x += w,
                Var::Y => g.y += w,
                Var::A => g.a += w,
                Var::U => g.u += w,
            }
        }
    }
    if let HamArgs::Second(a) = args {
        let lam = spec.lambda_avg;
        g.x += a.p[1];
        g.y -= lam * a.p[1];
        g.a -= (-lam * spec.delta).exp() * a.p[1];
    }
    for v in [g.x, g.y, g.a, g.u] {
        finite(v)?;
    }
    Ok(g)
}

pub fn grad_h(spec: &ProblemSpec, args: &HamArgs<'_>, which: Var) -> Result<f64> {
    Ok(grad_h_all(spec, args)?.get(which))
}

/// Central-difference partial of H, for cross-validation.
pub fn grad_h_fd(spec: &ProblemSpec, args: &HamArgs<'_>, which: Var) -> Result<f64> {
    let pt = args.point();
    let v = pt.get(which);
    let h = fd_step(v);
    let up = eval_h(spec, &args.with_point(pt.with(which, v + h)))?;
    let dn = eval_h(spec, &args.with_point(pt.with(which, v - h)))?;
    Ok((up - dn) / (2.0 * h))
}

/// Hessian of H in (x, y, a, u) by central differences of the analytic gradient.
pub fn hessian_h(spec: &ProblemSpec, args: &HamArgs<'_>) -> Result<[[f64; 4]; 4]> {
    let pt = args.point();
    let mut hm = [[0.0; 4]; 4];
    for (j, vj) in Var::ALL.iter().enumerate() {
        let v = pt.get(*vj);
        let h = 1e-4_f64.max(1e-4 * v.abs());
        let up = grad_h_all(spec, &args.with_point(pt.with(*vj, v + h)))?;
        let dn = grad_h_all(spec, &args.with_point(pt.with(*vj, v - h)))?;
        for (i, vi) in Var::ALL.iter().enumerate() {
            hm[i][j] = (up.get(*vi) - dn.get(*vi)) / (2.0 * h);
        }
    }
    for i in 0..4 {
        for j in 0..i {
            let s = 0.5 * (hm[i][j] + hm[j][i]);
            hm[i][j] = s;
            hm[j][i] = s;
        }
    }
    Ok(hm)
}

/// Maximise `h` on [lo, hi] by golden-section search, then up to three Newton
/// steps when the curvature is negative.
pub fn argmax_u<F: Fn(f64) -> f64>(h: F, lo: f64, hi: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidParameter("u-maximisation needs a bounded control set".into()));
    }
    if lo == hi {
        return Ok(lo);
    }
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (h(c), h(d));
    while b - a > 1e-10 * (1.0 + a.abs().max(b.abs())) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = h(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = h(d);
        }
    }
    let mut u = 0.5 * (a + b);
    for _ in 0..3 {
        let e = 1e-5 * (1.0 + u.abs());
        if u - e < lo || u + e > hi {
            break;
        }
        let (fm, f0, fp) = (h(u - e), h(u), h(u + e));
        let d2 = (fp - 2.0 * f0 + fm) / (e * e);
        if !(d2 < 0.0) {
            break;
        }
        let d1 = (fp - fm) / (2.0 * e);
        let next = (u - d1 / d2).clamp(lo, hi);
        if h(next) >= f0 {
            u = next;
        } else {
            break;
        }
    }
    let best = [lo, hi, u].into_iter().fold((u, h(u)), |acc, v| {
        let fv = h(v);
        if fv > acc.1 {
            (v, fv)
        } else {
            acc
        }
    });
    Ok(best.0)
}

/// A C^{1,2,1} test function F(t, x, a).
pub trait TestFunction: Sync {
    fn value(&self, t: f64, x: f64, a: f64) -> f64;
    fn d_t(&self, t: f64, x: f64, a: f64) -> f64;
    fn d_x(&self, t: f64, x: f64, a: f64) -> f64;
    fn d_xx(&self, t: f64, x: f64, a: f64) -> f64;
    fn d_a(&self, t: f64, x: f64, a: f64) -> f64;
}

/// F = x^2.
#[derive(Debug, Clone, Copy)]
pub struct SquareX;

impl TestFunction for SquareX {
    fn value(&self, _t: f64, x: f64, _a: f64) -> f64 {
        x * x
    }
    fn d_t(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
    fn d_x(&self, _t: f64, x: f64, _a: f64) -> f64 {
        2.0 * x
    }
    fn d_xx(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        2.0
    }
    fn d_a(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
}

/// F = x.
#[derive(Debug, Clone, Copy)]
pub struct IdentityX;

impl TestFunction for IdentityX {
    fn value(&self, _t: f64, x: f64, _a: f64) -> f64 {
        x
    }
    fn d_t(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
    fn d_x(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        1.0
    }
    fn d_xx(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
    fn d_a(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
}

/// F = a.
#[derive(Debug, Clone, Copy)]
pub struct AverageA;

impl TestFunction for AverageA {
    fn value(&self, _t: f64, _x: f64, a: f64) -> f64 {
        a
    }
    fn d_t(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
    fn d_x(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
    fn d_xx(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        0.0
    }
    fn d_a(&self, _t: f64, _x: f64, _a: f64) -> f64 {
        1.0
    }
}

/// Generator of F along the delay dynamics, jumps in compensated form.
pub fn delay_generator<F: TestFunction + ?Sized>(spec: &ProblemSpec, f: &F, p: &Point) -> f64 {
    let c = &spec.coeffs;
    let (t, x, a) = (p.t, p.x, p.a);
    let fx = f.d_x(t, x, a);
    let sig = c.diffusion(p);
    let lam = spec.lambda_avg;
    let mut g = f.d_t(t, x, a)
        + c.drift(p) * fx
        + 0.5 * sig * sig * f.d_xx(t, x, a)
        + (x - (-lam * spec.delta).exp() * p.y - lam * a) * f.d_a(t, x, a);
    if let Some(j) = spec.jump.as_ref().filter(|_| c.has_jumps()) {
        let base = f.value(t, x, a);
        g += j.integrate(|z| {
            let th = c.jump(p, z);
            f.value(t, x + th, a) - base - th * fx
        });
    }
    g
}

/// Monte Carlo estimate of
/// `E[F(T, X_T, A_T) - F(0, X_0, A_0) - int_0^T (generator of F) dt]`,
/// the generator integrated by the left-point rule.
pub fn ito_delay_residual<F: TestFunction + ?Sized>(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    f: &F,
    control: &ControlSpec,
    n_paths: usize,
    seed: u64,
) -> Result<MeanStderr> {
    let vals = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let r = simulate_path(spec, grid, control, NoiseStream::new(seed, i as u64))?;
            let n = r.last_valid();
            let mut integral = crate::stats::KahanSum::new();
            for k in 0..n {
                integral.add(delay_generator(spec, f, &r.point(k)) * grid.dt);
            }
            let v = f.value(r.t[n], r.x[n], r.a[n]) - f.value(0.0, r.x[0], r.a[0]) - integral.value();
            finite(v).map_err(|_| Error::NonFinite("Ito residual"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeanStderr::from_slice(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::{Example34Coeffs, Example34Params};
    use crate::model::{
        linear_quadratic, make_grid, ControlSet, InitialSegment, LqParams, Monomial, Polynomial,
        PolynomialCoeffs, ZeroCoeffs,
    };
    use std::sync::Arc;

    fn spec_with(c: Arc<dyn crate::model::Coefficients>) -> ProblemSpec {
        ProblemSpec::new(1.0, 0.5, c, ControlSet::new(0.0, 5.0).unwrap(), InitialSegment::Constant(1.0)).unwrap()
    }

    fn constants(f: f64, b: f64, s: f64) -> Arc<PolynomialCoeffs> {
        let k = |v| Polynomial::new(vec![Monomial::new(v, 0, 0, 0, 0)]);
        Arc::new(PolynomialCoeffs { drift: k(b), diffusion: k(s), reward: k(f), ..Default::default() })
    }

    #[test]
    fn direct_sums() {
        let spec = spec_with(Arc::new(ZeroCoeffs));
        let pt = Point::new(0.0, 1.0, 2.0, 3.0, 0.5);
        assert_eq!(eval_h1(&spec, &HamArgs1 { point: pt, p: 4.0, q: 5.0, r: &[] }).unwrap(), 0.0);
        let spec = spec_with(constants(1.0, 2.0, 3.0));
        assert_eq!(eval_h1(&spec, &HamArgs1 { point: pt, p: 1.0, q: 1.0, r: &[] }).unwrap(), 6.0);
    }

    #[test]
    fn p2_term() {
        let spec = spec_with(Arc::new(ZeroCoeffs));
        let h = |x, y, a| {
            eval_h2(&spec, &HamArgs2 { point: Point::new(0.0, x, y, a, 0.0), p: [0.0, 1.0, 0.0], q: [0.0; 2], r: &[] }).unwrap()
        };
        assert_eq!(h(1.0, 0.0, 0.0), 1.0);
        let lam = spec.lambda_avg;
        let (y, a) = (0.7, 1.3);
        assert!(h(lam * y + (-lam * spec.delta).exp() * a, y, a).abs() < 1e-15);
    }

    #[test]
    fn quadratic_in_u() {
        let c = PolynomialCoeffs { reward: Polynomial::new(vec![Monomial::new(-1.0, 0, 0, 0, 2)]), ..Default::default() };
        let spec = spec_with(Arc::new(c));
        let args = HamArgs::First(HamArgs1 { point: Point::new(0.0, 1.0, 0.0, 0.0, 3.0), p: 0.0, q: 0.0, r: &[] });
        assert_eq!(grad_h(&spec, &args, Var::U).unwrap(), -6.0);
    }

    #[test]
    fn example_gradient_in_u() {
        let params = Example34Params { gamma: 0.5, mu: 0.05, rho: 0.1, sigma: 0.2, x0: 1.0 };
        let spec = spec_with(Arc::new(Example34Coeffs { params }));
        let pt = Point::new(2.0, 1.5, 0.0, 0.0, 0.3);
        let args = HamArgs::First(HamArgs1 { point: pt, p: 0.8, q: 0.4, r: &[] });
        let expected = (-0.2f64).exp() * 0.3f64.powf(-0.5) * 1.5f64.sqrt() - 1.5 * 0.8;
        assert!((grad_h(&spec, &args, Var::U).unwrap() - expected).abs() < 1e-12);
        let h = eval_h(&spec, &args).unwrap();
        let direct = (-0.2f64).exp() * (0.45f64).sqrt() / 0.5 + (1.5 * 0.05 - 0.45) * 0.8 + 0.2 * 1.5 * 0.4;
        assert!((h - direct).abs() < 1e-12);
    }

    #[test]
    fn argmax_of_concave_quadratic() {
        let u = argmax_u(|u| -(u - 0.3) * (u - 0.3), 0.0, 1.0).unwrap();
        assert!((u - 0.3).abs() < 1e-9);
        assert_eq!(argmax_u(|u| u, 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn identity_residual_is_zero_without_dynamics() {
        let spec = spec_with(Arc::new(ZeroCoeffs));
        let grid = make_grid(1.0, 0.01, 2.0).unwrap();
        let r = ito_delay_residual(&spec, &grid, &IdentityX, &ControlSpec::Constant(0.0), 10, 1).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn lq_hessian() {
        let spec = spec_with(Arc::new(linear_quadratic(&LqParams { qx: 2.0, ru: 4.0, ..Default::default() })));
        let args = HamArgs::First(HamArgs1 { point: Point::new(0.0, 0.3, 0.0, 0.0, 0.2), p: 1.0, q: 0.0, r: &[] });
        let h = hessian_h(&spec, &args).unwrap();
        assert!((h[0][0] + 2.0).abs() < 1e-6);
        assert!((h[3][3] + 4.0).abs() < 1e-6);
        assert!(h[0][3].abs() < 1e-6);
    }
}

//! Closed-form benchmark problems: the non-delay consumption problem and its
//! delayed counterpart with a moving-average term.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ControlSpec;
use crate::model::{
    make_grid, Coefficients, ControlSet, Grad, InitialSegment, Point, ProblemSpec, TimeGrid,
};

/// Consumption problem without delay:
/// `dX = (mu X - u X) dt + sigma X dB`, `f = e^{-rho t} (u X)^gamma / gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example34Params {
    pub gamma: f64,
    pub mu: f64,
    pub rho: f64,
    /// Volatility factor: sigma(x) = sigma * x.
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "one")]
    pub x0: f64,
}

fn one() -> f64 {
    1.0
}

impl Example34Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma != 1.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma = {}", self.gamma)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidParameter(format!("rho = {}", self.rho)));
        }
        if !(self.x0 > 0.0) {
            return Err(Error::InvalidParameter(format!("x0 = {}", self.x0)));
        }
        Ok(())
    }

    /// Optimal consumption fraction along the closed-form optimum.
    pub fn k(&self) -> f64 {
        self.mu + (self.rho - self.mu) / (1.0 - self.gamma)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Example34Coeffs {
    pub params: Example34Params,
}

impl Coefficients for Example34Coeffs {
    fn drift(&self, p: &Point) -> f64 {
        (self.params.mu - p.u) * p.x
    }
    fn diffusion(&self, p: &Point) -> f64 {
        self.params.sigma * p.x
    }
    fn reward(&self, p: &Point) -> f64 {
        let g = self.params.gamma;
        (-self.params.rho * p.t).exp() * (p.u * p.x).powf(g) / g
    }
    fn drift_grad(&self, p: &Point) -> Grad {
        Grad { x: self.params.mu - p.u, y: 0.0, a: 0.0, u: -p.x }
    }
    fn diffusion_grad(&self, _p: &Point) -> Grad {
        Grad { x: self.params.sigma, ..Grad::default() }
    }
    fn jump_grad(&self, _p: &Point, _z: f64) -> Grad {
        Grad::default()
    }
    fn reward_grad(&self, p: &Point) -> Grad {
        let g = self.params.gamma;
        let d = (-self.params.rho * p.t).exp();
        Grad {
            x: d * p.u.powf(g) * p.x.powf(g - 1.0),
            y: 0.0,
            a: 0.0,
            u: d * p.u.powf(g - 1.0) * p.x.powf(g),
        }
    }
    fn in_domain(&self, p: &Point) -> bool {
        p.x > 0.0 && p.u >= 0.0
    }
    fn has_jumps(&self) -> bool {
        false
    }
}

/// Closed-form adjoint `p0 e^{-mu t}`.
pub fn ex34_adjoint(params: &Example34Params, t: f64, p0: f64) -> f64 {
    p0 * (-params.mu * t).exp()
}

/// The feedback rule `u = p0^{1/(gamma-1)} e^{(rho-mu) t/(gamma-1)} / x`.
pub fn ex34_control(params: &Example34Params, t: f64, x: f64, p0: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("wealth x = {x} must be positive")));
    }
    if !(p0 > 0.0) {
        return Err(Error::Domain(format!("p0 = {p0} must be positive")));
    }
    let e = 1.0 / (params.gamma - 1.0);
    Ok(p0.powf(e) * (e * (params.rho - params.mu) * t).exp() / x)
}

/// `int_0^inf exp(-(mu + (rho - mu)/(1 - gamma)) s) ds`.
pub fn ex34_integral(params: &Example34Params) -> Result<f64> {
    let k = params.k();
    if !(k > 0.0) {
        return Err(Error::DivergentIntegral(format!(
            "exponent rate mu + (rho - mu)/(1 - gamma) = {k} is not positive"
        )));
    }
    Ok(1.0 / k)
}

/// Numerical cross-check of [`ex34_integral`] truncated at `quadrature_t`.
pub fn ex34_integral_quadrature(params: &Example34Params, quadrature_t: f64) -> f64 {
    let k = params.k();
    let panels = (quadrature_t.max(1.0) as usize).max(8);
    crate::quadrature::integrate_composite(|s| (-k * s).exp(), 0.0, quadrature_t, panels)
}

/// The value of p(0) keeping the closed-form wealth non-negative.
pub fn ex34_p0_star(params: &Example34Params) -> Result<f64> {
    let i = ex34_integral(params)?;
    Ok((params.x0 / i).powf(params.gamma - 1.0))
}

/// Closed-form optimal wealth `x0 e^{(mu - k) t}`.
pub fn ex34_state(params: &Example34Params, t: f64) -> f64 {
    params.x0 * ((params.mu - params.k()) * t).exp()
}

/// The feedback rule as a control. Non-positive wealth maps to zero consumption.
pub fn ex34_feedback(params: &Example34Params, p0: f64) -> ControlSpec {
    let pr = *params;
    ControlSpec::feedback(move |t, x, _y, _a| ex34_control(&pr, t, x, p0).unwrap_or(0.0))
}

/// The closed-form optimum realised open loop: the constant fraction `k`.
pub fn ex34_open_loop(params: &Example34Params) -> ControlSpec {
    ControlSpec::Constant(params.k())
}

/// Example problem with jumps disabled and a flat initial segment.
pub fn ex34_problem(params: &Example34Params, delta: f64, control_set: ControlSet) -> Result<ProblemSpec> {
    params.validate()?;
    let mut spec = ProblemSpec::new(
        delta,
        params.rho,
        Arc::new(Example34Coeffs { params: *params }),
        control_set,
        InitialSegment::Constant(params.x0),
    )?;
    spec.warnings.gamma_outside_unit = !(params.gamma < 1.0);
    Ok(spec)
}

/// Consumption problem with delay:
/// `dX = [mu X + alpha Y + beta A - u W] dt + sigma X dB`, `W = X + e^{rho delta} beta Y`,
/// `f = e^{-rho t} (u W)^gamma / gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example35Params {
    pub gamma: f64,
    pub mu: f64,
    pub rho: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub sigma: f64,
    pub lambda_avg: f64,
}

impl Example35Params {
    /// Parameters with alpha chosen to satisfy the structural constraint.
    pub fn constrained(gamma: f64, mu: f64, rho: f64, delta: f64, beta: f64, sigma: f64) -> Self {
        let mut p = Self { gamma, mu, rho, delta, alpha: 0.0, beta, sigma, lambda_avg: rho };
        p.alpha = p.alpha_constraint();
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma != 1.0) {
            return Err(Error::InvalidParameter(format!("gamma = {}", self.gamma)));
        }
        if !(self.rho > 0.0 && self.delta > 0.0 && self.lambda_avg > 0.0) {
            return Err(Error::InvalidParameter("rho, delta and lambda_avg must be positive".into()));
        }
        Ok(())
    }

    /// `c = e^{rho delta} beta`, the weight of the delayed state in wealth.
    pub fn c(&self) -> f64 {
        (self.rho * self.delta).exp() * self.beta
    }

    /// `e^{rho delta} beta (mu + lambda + e^{rho delta} beta)`.
    pub fn alpha_constraint(&self) -> f64 {
        let c = self.c();
        c * (self.mu + self.lambda_avg + c)
    }

    pub fn constraint_residual(&self) -> f64 {
        self.alpha - self.alpha_constraint()
    }

    pub fn constraint_satisfied(&self) -> bool {
        self.constraint_residual().abs() <= 1e-12 * self.alpha.abs().max(1.0)
    }

    fn feedback_rate(&self) -> f64 {
        (self.rho - self.mu - self.c()) / (self.gamma - 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Example35Coeffs {
    pub params: Example35Params,
}

impl Example35Coeffs {
    fn wealth(&self, p: &Point) -> f64 {
        p.x + self.params.c() * p.y
    }
}

impl Coefficients for Example35Coeffs {
    fn drift(&self, p: &Point) -> f64 {
        let q = &self.params;
        q.mu * p.x + q.alpha * p.y + q.beta * p.a - p.u * self.wealth(p)
    }
    fn diffusion(&self, p: &Point) -> f64 {
        self.params.sigma * p.x
    }
    fn reward(&self, p: &Point) -> f64 {
        let g = self.params.gamma;
        (-self.params.rho * p.t).exp() * (p.u * self.wealth(p)).powf(g) / g
    }
    fn drift_grad(&self, p: &Point) -> Grad {
        let q = &self.params;
        Grad { x: q.mu - p.u, y: q.alpha - p.u * q.c(), a: q.beta, u: -self.wealth(p) }
    }
    fn diffusion_grad(&self, _p: &Point) -> Grad {
        Grad { x: self.params.sigma, ..Grad::default() }
    }
    fn jump_grad(&self, _p: &Point, _z: f64) -> Grad {
        Grad::default()
    }
    fn reward_grad(&self, p: &Point) -> Grad {
        let g = self.params.gamma;
        let d = (-self.params.rho * p.t).exp();
        let w = self.wealth(p);
        let fx = d * p.u.powf(g) * w.powf(g - 1.0);
        Grad { x: fx, y: self.params.c() * fx, a: 0.0, u: d * p.u.powf(g - 1.0) * w.powf(g) }
    }
    fn in_domain(&self, p: &Point) -> bool {
        self.wealth(p) > 0.0 && p.u >= 0.0
    }
    fn has_jumps(&self) -> bool {
        false
    }
}

/// The feedback rule with `p0` in place of K.
pub fn ex35_control(params: &Example35Params, t: f64, x: f64, y: f64, p0: f64) -> Result<f64> {
    let w = x + params.c() * y;
    if !(w > 0.0) {
        return Err(Error::Domain(format!("wealth composite {w} must be positive")));
    }
    if !(p0 > 0.0) {
        return Err(Error::Domain(format!("p0 = {p0} must be positive")));
    }
    let e = 1.0 / (params.gamma - 1.0);
    Ok(p0.powf(e) * (params.feedback_rate() * t).exp() / w)
}

/// Closed-form adjoint `p0 e^{-(mu + c) t}`.
pub fn ex35_adjoint(params: &Example35Params, t: f64, p0: f64) -> f64 {
    p0 * (-(params.mu + params.c()) * t).exp()
}

pub fn ex35_feedback(params: &Example35Params, p0: f64) -> ControlSpec {
    let pr = *params;
    ControlSpec::feedback(move |t, x, y, _a| ex35_control(&pr, t, x, y, p0).unwrap_or(0.0))
}

pub fn ex35_problem(
    params: &Example35Params,
    control_set: ControlSet,
    initial_segment: InitialSegment,
) -> Result<ProblemSpec> {
    params.validate()?;
    let mut spec = ProblemSpec::new(
        params.delta,
        params.rho,
        Arc::new(Example35Coeffs { params: *params }),
        control_set,
        initial_segment,
    )?
    .with_lambda_avg(params.lambda_avg)?;
    spec.warnings.gamma_outside_unit = !(params.gamma < 1.0);
    if !params.constraint_satisfied() {
        spec.warnings.alpha_constraint_violated = true;
    }
    spec.warnings.alpha_residual = Some(params.constraint_residual());
    Ok(spec)
}

/// Settings of the bisection for K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSearch {
    pub dt: f64,
    pub horizon: f64,
    pub tol: f64,
}

impl Default for KSearch {
    fn default() -> Self {
        Self { dt: 0.01, horizon: 200.0, tol: 1e-6 }
    }
}

/// Whether the deterministic wealth composite stays positive on (0, horizon]
/// when consumption follows the feedback rule with `p0`.
pub fn ex35_wealth_positive(
    params: &Example35Params,
    grid: &TimeGrid,
    segment: &[f64],
    p0: f64,
) -> bool {
    let q = params;
    let c = q.c();
    let m = grid.m;
    let dt = grid.dt;
    let decay = (-q.rho * q.delta).exp();
    let cons0 = p0.powf(1.0 / (q.gamma - 1.0));
    let rate = q.feedback_rate();
    let consumption = |t: f64| cons0 * (rate * t).exp();
    let mut xs: Vec<f64> = segment.to_vec();
    let mut a = moving_average_of(segment, dt, q.rho);
    for k in 0..grid.n {
        let t = grid.t(k);
        let x = xs[k + m];
        let (y, y1) = (xs[k], xs[k + 1]);
        let fx = |x: f64, y: f64, a: f64, t: f64| q.mu * x + q.alpha * y + q.beta * a - consumption(t);
        let fa = |x: f64, y: f64, a: f64| x - decay * y - q.rho * a;
        let kx1 = fx(x, y, a, t);
        let ka1 = fa(x, y, a);
        let (xp, ap) = (x + dt * kx1, a + dt * ka1);
        let kx2 = fx(xp, y1, ap, t + dt);
        let ka2 = fa(xp, y1, ap);
        let xn = x + 0.5 * dt * (kx1 + kx2);
        a += 0.5 * dt * (ka1 + ka2);
        if !(xn + c * y1 > 0.0) || !xn.is_finite() {
            return false;
        }
        xs.push(xn);
    }
    true
}

fn moving_average_of(segment: &[f64], dt: f64, rho: f64) -> f64 {
    let m = segment.len() - 1;
    let w: Vec<f64> = segment
        .iter()
        .enumerate()
        .map(|(i, x)| (-rho * (m - i) as f64 * dt).exp() * x)
        .collect();
    crate::quadrature::trapezoid(&w, dt)
}

/// `K = inf{p0 : wealth composite stays positive}` on the deterministic flow,
/// located by bisection to absolute tolerance `search.tol`.
pub fn ex35_k(params: &Example35Params, segment: &InitialSegment, search: &KSearch) -> Result<f64> {
    params.validate()?;
    let grid = make_grid(params.delta, search.dt, search.horizon)?;
    let seg = segment.values(&grid)?;
    let ok = |p0: f64| ex35_wealth_positive(params, &grid, &seg, p0);
    let mut hi = 1.0;
    let mut tries = 0;
    while !ok(hi) {
        hi *= 2.0;
        tries += 1;
        if tries > 80 {
            return Err(Error::NoSignChange);
        }
    }
    let mut lo = hi;
    tries = 0;
    while ok(lo) {
        lo *= 0.5;
        tries += 1;
        if tries > 80 {
            return Err(Error::NoSignChange);
        }
    }
    while hi - lo > search.tol {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

//! Coefficient callbacks b, sigma, theta, f and their partials.

use serde::{Deserialize, Serialize};

/// Arguments of every coefficient: time, state, delayed state, average, control.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub a: f64,
    pub u: f64,
}

impl Point {
    pub fn new(t: f64, x: f64, y: f64, a: f64, u: f64) -> Self {
        Self { t, x, y, a, u }
    }

    pub fn get(&self, v: Var) -> f64 {
        match v {
            Var::X => self.x,
            Var::Y => self.y,
            Var::A => self.a,
            Var::U => self.u,
        }
    }

    pub fn with(mut self, v: Var, value: f64) -> Self {
        match v {
            Var::X => self.x = value,
            Var::Y => self.y = value,
            Var::A => self.a = value,
            Var::U => self.u = value,
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Var {
    X,
    Y,
    A,
    U,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::X, Var::Y, Var::A, Var::U];
}

/// First partials in (x, y, a, u).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Grad {
    pub x: f64,
    pub y: f64,
    pub a: f64,
    pub u: f64,
}

impl Grad {
    pub fn get(&self, v: Var) -> f64 {
        match v {
            Var::X => self.x,
            Var::Y => self.y,
            Var::A => self.a,
            Var::U => self.u,
        }
    }

    pub fn scale(self, c: f64) -> Self {
        Self { x: c * self.x, y: c * self.y, a: c * self.a, u: c * self.u }
    }

    pub fn add(self, o: Self) -> Self {
        Self { x: self.x + o.x, y: self.y + o.y, a: self.a + o.a, u: self.u + o.u }
    }
}

/// Central-difference step used for missing partials.
pub fn fd_step(v: f64) -> f64 {
    1e-6_f64.max(1e-6 * v.abs())
}

/// Central-difference gradient of `g` at `p`.
pub fn fd_grad<G: Fn(&Point) -> f64>(g: G, p: &Point) -> Grad {
    let d = |v: Var| {
        let h = fd_step(p.get(v));
        (g(&p.with(v, p.get(v) + h)) - g(&p.with(v, p.get(v) - h))) / (2.0 * h)
    };
    Grad { x: d(Var::X), y: d(Var::Y), a: d(Var::A), u: d(Var::U) }
}

/// The coefficient bundle of the controlled delay equation.
///
/// Only the four values are required; partials default to central finite
/// differences with step `max(1e-6, 1e-6 |v|)`. Implementations must be pure.
pub trait Coefficients: Send + Sync + std::fmt::Debug {
    fn drift(&self, p: &Point) -> f64;
    fn diffusion(&self, p: &Point) -> f64;
    /// Jump size for mark `z`.
    fn jump(&self, _p: &Point, _z: f64) -> f64 {
        0.0
    }
    fn reward(&self, p: &Point) -> f64;

    fn drift_grad(&self, p: &Point) -> Grad {
        fd_grad(|q| self.drift(q), p)
    }
    fn diffusion_grad(&self, p: &Point) -> Grad {
        fd_grad(|q| self.diffusion(q), p)
    }
    fn jump_grad(&self, p: &Point, z: f64) -> Grad {
        fd_grad(|q| self.jump(q, z), p)
    }
    fn reward_grad(&self, p: &Point) -> Grad {
        fd_grad(|q| self.reward(q), p)
    }

    /// Whether the reward is defined at `p`. Paths leaving the domain are frozen.
    fn in_domain(&self, _p: &Point) -> bool {
        true
    }

    /// False when `jump` is identically zero, which lets callers skip mark work.
    fn has_jumps(&self) -> bool {
        true
    }
}

/// A monomial `coef * x^px * y^py * a^pa * u^pu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    #[serde(default)]
    pub x: u32,
    #[serde(default)]
    pub y: u32,
    #[serde(default)]
    pub a: u32,
    #[serde(default)]
    pub u: u32,
}

impl Monomial {
    pub fn new(coef: f64, x: u32, y: u32, a: u32, u: u32) -> Self {
        Self { coef, x, y, a, u }
    }

    fn eval(&self, p: &Point) -> f64 {
        self.coef * pw(p.x, self.x) * pw(p.y, self.y) * pw(p.a, self.a) * pw(p.u, self.u)
    }

    fn grad(&self, p: &Point) -> Grad {
        let (fx, fy, fa, fu) = (pw(p.x, self.x), pw(p.y, self.y), pw(p.a, self.a), pw(p.u, self.u));
        let d = |e: u32, v: f64| if e == 0 { 0.0 } else { e as f64 * pw(v, e - 1) };
        Grad {
            x: self.coef * d(self.x, p.x) * fy * fa * fu,
            y: self.coef * fx * d(self.y, p.y) * fa * fu,
            a: self.coef * fx * fy * d(self.a, p.a) * fu,
            u: self.coef * fx * fy * fa * d(self.u, p.u),
        }
    }
}

fn pw(v: f64, e: u32) -> f64 {
    match e {
        0 => 1.0,
        1 => v,
        2 => v * v,
        _ => v.powi(e as i32),
    }
}

/// Sum of monomials in (x, y, a, u).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Self { terms: terms.into_iter().filter(|m| m.coef != 0.0).collect() }
    }

    pub fn eval(&self, p: &Point) -> f64 {
        self.terms.iter().map(|m| m.eval(p)).sum()
    }

    pub fn grad(&self, p: &Point) -> Grad {
        self.terms.iter().fold(Grad::default(), |g, m| g.add(m.grad(p)))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Polynomial coefficients with `theta = z * jump(x,y,a,u)` and
/// `f = exp(-reward_discount * t) * reward(x,y,a,u)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolynomialCoeffs {
    pub drift: Polynomial,
    pub diffusion: Polynomial,
    pub jump: Polynomial,
    pub reward: Polynomial,
    pub reward_discount: f64,
}

impl PolynomialCoeffs {
    fn disc(&self, t: f64) -> f64 {
        if self.reward_discount == 0.0 {
            1.0
        } else {
            (-self.reward_discount * t).exp()
        }
    }
}

impl Coefficients for PolynomialCoeffs {
    fn drift(&self, p: &Point) -> f64 {
        self.drift.eval(p)
    }
    fn diffusion(&self, p: &Point) -> f64 {
        self.diffusion.eval(p)
    }
    fn jump(&self, p: &Point, z: f64) -> f64 {
        z * self.jump.eval(p)
    }
    fn reward(&self, p: &Point) -> f64 {
        self.disc(p.t) * self.reward.eval(p)
    }
    fn drift_grad(&self, p: &Point) -> Grad {
        self.drift.grad(p)
    }
    fn diffusion_grad(&self, p: &Point) -> Grad {
        self.diffusion.grad(p)
    }
    fn jump_grad(&self, p: &Point, z: f64) -> Grad {
        self.jump.grad(p).scale(z)
    }
    fn reward_grad(&self, p: &Point) -> Grad {
        self.reward.grad(p).scale(self.disc(p.t))
    }
    fn has_jumps(&self) -> bool {
        !self.jump.is_zero()
    }
}

/// Parameters of the linear-quadratic family
///
/// `b = b0 + bx x + by y + ba a + bu u`, `sigma = s0 + sx x + su u`,
/// `theta = z (j0 + jx x)`,
/// `f = e^{-kappa t} (lx x + lu u - qx x^2 / 2 - ru u^2 / 2)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqParams {
    pub b0: f64,
    pub bx: f64,
    pub by: f64,
    pub ba: f64,
    pub bu: f64,
    pub s0: f64,
    pub sx: f64,
    pub su: f64,
    pub j0: f64,
    pub jx: f64,
    pub qx: f64,
    pub ru: f64,
    pub lx: f64,
    pub lu: f64,
    pub kappa: f64,
}

pub fn linear_quadratic(p: &LqParams) -> PolynomialCoeffs {
    let m = Monomial::new;
    PolynomialCoeffs {
        drift: Polynomial::new(vec![
            m(p.b0, 0, 0, 0, 0),
            m(p.bx, 1, 0, 0, 0),
            m(p.by, 0, 1, 0, 0),
            m(p.ba, 0, 0, 1, 0),
            m(p.bu, 0, 0, 0, 1),
        ]),
        diffusion: Polynomial::new(vec![m(p.s0, 0, 0, 0, 0), m(p.sx, 1, 0, 0, 0), m(p.su, 0, 0, 0, 1)]),
        jump: Polynomial::new(vec![m(p.j0, 0, 0, 0, 0), m(p.jx, 1, 0, 0, 0)]),
        reward: Polynomial::new(vec![
            m(p.lx, 1, 0, 0, 0),
            m(p.lu, 0, 0, 0, 1),
            m(-0.5 * p.qx, 2, 0, 0, 0),
            m(-0.5 * p.ru, 0, 0, 0, 2),
        ]),
        reward_discount: p.kappa,
    }
}

/// All coefficients identically zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCoeffs;

impl Coefficients for ZeroCoeffs {
    fn drift(&self, _: &Point) -> f64 {
        0.0
    }
    fn diffusion(&self, _: &Point) -> f64 {
        0.0
    }
    fn reward(&self, _: &Point) -> f64 {
        0.0
    }
    fn drift_grad(&self, _: &Point) -> Grad {
        Grad::default()
    }
    fn diffusion_grad(&self, _: &Point) -> Grad {
        Grad::default()
    }
    fn jump_grad(&self, _: &Point, _: f64) -> Grad {
        Grad::default()
    }
    fn reward_grad(&self, _: &Point) -> Grad {
        Grad::default()
    }
    fn has_jumps(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_gradient() {
        let m = Monomial::new(2.0, 2, 1, 0, 3);
        let p = Point::new(0.0, 1.5, -0.5, 3.0, 0.7);
        let g = m.grad(&p);
        assert!((g.x - 2.0 * 2.0 * 1.5 * -0.5 * 0.7f64.powi(3)).abs() < 1e-14);
        assert!((g.y - 2.0 * 1.5 * 1.5 * 0.7f64.powi(3)).abs() < 1e-14);
        assert_eq!(g.a, 0.0);
        assert!((g.u - 2.0 * 2.25 * -0.5 * 3.0 * 0.49).abs() < 1e-14);
    }

    #[test]
    fn lq_reward_gradient_matches_fd() {
        let c = linear_quadratic(&LqParams { qx: 1.0, ru: 2.0, lx: 0.3, lu: -0.2, kappa: 0.1, ..Default::default() });
        let p = Point::new(1.0, 0.4, 0.0, 0.0, -1.2);
        let g = c.reward_grad(&p);
        let f = fd_grad(|q| c.reward(q), &p);
        assert!((g.x - f.x).abs() < 1e-8);
        assert!((g.u - f.u).abs() < 1e-8);
    }

    #[test]
    fn zero_coefficients_vanish() {
        let p = Point::new(0.3, 1.0, 2.0, 3.0, 4.0);
        assert_eq!(ZeroCoeffs.drift(&p), 0.0);
        assert_eq!(ZeroCoeffs.jump(&p, 1.0), 0.0);
    }
}

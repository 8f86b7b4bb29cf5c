//! Problem definition: coefficients, delay, control set, jump measure, grid.

mod coeffs;
mod jump;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use coeffs::{
    fd_grad, fd_step, linear_quadratic, Coefficients, Grad, LqParams, Monomial, Point, Polynomial,
    PolynomialCoeffs, Var, ZeroCoeffs,
};
pub use jump::{JumpModel, MarkAtom, MarkDistribution, MarkNode};

use crate::config::RawConfig;
use crate::error::{Error, Result};

/// Closed interval of admissible control values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub lo: f64,
    pub hi: f64,
}

impl ControlSet {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::BadInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    /// Projection onto the interval and whether it was active.
    pub fn clip(&self, u: f64) -> (f64, bool) {
        if u > self.hi {
            (self.hi, true)
        } else if u < self.lo {
            (self.lo, true)
        } else {
            (u, false)
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }

    /// True when `u` sits on a finite endpoint (within `tol`).
    pub fn on_boundary(&self, u: f64, tol: f64) -> bool {
        (self.hi.is_finite() && u >= self.hi - tol) || (self.lo.is_finite() && u <= self.lo + tol)
    }
}

/// Initial path X0(s), s in [-delta, 0].
#[derive(Clone)]
pub enum InitialSegment {
    Constant(f64),
    /// `X0(s) = at_zero + slope * s`.
    Linear { at_zero: f64, slope: f64 },
    /// Values on the grid of [-delta, 0], oldest first (m + 1 entries).
    Samples(Vec<f64>),
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for InitialSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Self::Linear { at_zero, slope } => {
                f.debug_struct("Linear").field("at_zero", at_zero).field("slope", slope).finish()
            }
            Self::Samples(v) => f.debug_tuple("Samples").field(&v.len()).finish(),
            Self::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl InitialSegment {
    /// Grid values X0(-m dt), ..., X0(0).
    pub fn values(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let m = grid.m;
        let vals: Vec<f64> = match self {
            Self::Constant(c) => vec![*c; m + 1],
            Self::Linear { at_zero, slope } => {
                (0..=m).map(|i| at_zero + slope * grid.seg_time(i)).collect()
            }
            Self::Samples(v) => {
                if v.len() != m + 1 {
                    return Err(Error::InvalidParameter(format!(
                        "initial segment has {} samples, grid needs {}",
                        v.len(),
                        m + 1
                    )));
                }
                v.clone()
            }
            Self::Function(g) => (0..=m).map(|i| g(grid.seg_time(i))).collect(),
        };
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSegment { s: grid.seg_time(i) });
        }
        Ok(vals)
    }

    pub fn at_zero(&self, grid: &TimeGrid) -> Result<f64> {
        Ok(*self.values(grid)?.last().expect("segment is non-empty"))
    }
}

/// Uniform grid with the delay aligned: delta = m dt, T = n dt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub horizon: f64,
    pub delta: f64,
    pub m: usize,
    pub n: usize,
}

impl TimeGrid {
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Time of the i-th initial-segment node (i = 0 is -delta).
    pub fn seg_time(&self, i: usize) -> f64 {
        (i as f64 - self.m as f64) * self.dt
    }

    /// Same delay and step with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        make_grid(self.delta, self.dt, horizon)
    }

    /// Index of the grid point nearest to `t`, clamped to [0, n].
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n)
    }
}

fn snap(value: f64, dt: f64, what: &'static str) -> Result<usize> {
    let ratio = value / dt;
    let r = ratio.round();
    if !ratio.is_finite() || r < 1.0 || ((ratio - r) / r).abs() > 1e-12 {
        return Err(Error::GridMismatch { what, ratio });
    }
    Ok(r as usize)
}

/// Build a grid with `m = delta/dt` and `n = horizon/dt`, both integral to
/// relative tolerance 1e-12.
pub fn make_grid(delta: f64, dt: f64, horizon: f64) -> Result<TimeGrid> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt = {dt}")));
    }
    if !(delta > 0.0 && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta}, horizon = {horizon}")));
    }
    let m = snap(delta, dt, "delta")?;
    let n = snap(horizon, dt, "horizon")?;
    if n < m {
        return Err(Error::InvalidParameter(format!("horizon {horizon} shorter than delay {delta}")));
    }
    Ok(TimeGrid { dt, horizon: n as f64 * dt, delta: m as f64 * dt, m, n })
}

/// Non-fatal findings raised while building a problem.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Warnings {
    pub alpha_constraint_violated: bool,
    pub alpha_residual: Option<f64>,
    pub gamma_outside_unit: bool,
}

impl Warnings {
    pub fn messages(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.alpha_constraint_violated {
            out.push(format!(
                "alpha constraint violated (residual {:.3e}); closed-form adjoint structure does not apply",
                self.alpha_residual.unwrap_or(f64::NAN)
            ));
        }
        if self.gamma_outside_unit {
            out.push("gamma outside (0, 1): the reward is not concave in u".into());
        }
        out
    }
}

/// A validated control problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub delta: f64,
    pub rho: f64,
    pub lambda_avg: f64,
    pub discount: f64,
    pub coeffs: Arc<dyn Coefficients>,
    pub control_set: ControlSet,
    pub initial_segment: InitialSegment,
    pub jump: Option<JumpModel>,
    pub warnings: Warnings,
}

impl ProblemSpec {
    /// A problem with `lambda_avg = discount = rho` and no jumps.
    pub fn new(
        delta: f64,
        rho: f64,
        coeffs: Arc<dyn Coefficients>,
        control_set: ControlSet,
        initial_segment: InitialSegment,
    ) -> Result<Self> {
        let spec = Self {
            delta,
            rho,
            lambda_avg: rho,
            discount: rho,
            coeffs,
            control_set,
            initial_segment,
            jump: None,
            warnings: Warnings::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_lambda_avg(mut self, lambda: f64) -> Result<Self> {
        self.lambda_avg = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        self.discount = discount;
        self.validate()?;
        Ok(self)
    }

    pub fn with_jump(mut self, jump: Option<JumpModel>) -> Self {
        self.jump = jump.filter(|j| j.intensity > 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("rho", self.rho),
            ("lambda_avg", self.lambda_avg),
            ("discount", self.discount),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        ControlSet::new(self.control_set.lo, self.control_set.hi)?;
        Ok(())
    }

    /// Validate the initial segment on a grid and return its values.
    pub fn segment_on(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        if (grid.delta - self.delta).abs() > 1e-12 * self.delta {
            return Err(Error::GridMismatch { what: "delta", ratio: self.delta / grid.dt });
        }
        self.initial_segment.values(grid)
    }

    /// `int theta(p, z) nu(dz)`, zero without jumps.
    pub fn compensator(&self, p: &Point) -> f64 {
        match &self.jump {
            Some(j) if self.coeffs.has_jumps() => j.integrate(|z| self.coeffs.jump(p, z)),
            _ => 0.0,
        }
    }

    pub fn has_jumps(&self) -> bool {
        self.jump.is_some() && self.coeffs.has_jumps()
    }

    pub fn n_atoms(&self) -> usize {
        match &self.jump {
            Some(j) if self.coeffs.has_jumps() => j.n_atoms(),
            _ => 0,
        }
    }
}

/// Build and validate a problem from a parsed config.
pub fn build_problem(raw: &RawConfig) -> Result<ProblemSpec> {
    let grid = make_grid(raw.problem.delta, raw.grid.dt, raw.grid.horizon)?;
    let spec = raw.problem_spec()?;
    spec.segment_on(&grid)?;
    Ok(spec)
}

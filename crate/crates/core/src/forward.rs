//! Euler–Maruyama simulation of the controlled delay equation and of the
//! variational process, under common random numbers.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ControlSet, Grad, Point, ProblemSpec, TimeGrid};

/// Ring buffer holding X on the grid of [t - delta, t], oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBuffer {
    data: Vec<f64>,
    head: usize,
}

impl SegmentBuffer {
    /// `values` must hold m + 1 samples, oldest first.
    pub fn from_values(values: &[f64]) -> Self {
        assert!(values.len() >= 2, "segment needs at least two nodes");
        Self { data: values.to_vec(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// i-th entry counted from the oldest.
    pub fn get(&self, i: usize) -> f64 {
        self.data[(self.head + i) % self.data.len()]
    }

    pub fn oldest(&self) -> f64 {
        self.data[self.head]
    }

    /// Second oldest entry, which becomes the oldest after the next push.
    pub fn second_oldest(&self) -> f64 {
        self.get(1)
    }

    pub fn newest(&self) -> f64 {
        self.get(self.data.len() - 1)
    }

    /// Append `x` and return the evicted oldest value.
    pub fn push(&mut self, x: f64) -> f64 {
        let old = self.data[self.head];
        self.data[self.head] = x;
        self.head = (self.head + 1) % self.data.len();
        old
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.data.len()).map(|i| self.get(i)).collect()
    }
}

/// Trapezoid value of `int_{t-delta}^t e^{-rho (t-r)} X(r) dr` over the segment.
pub fn moving_average_trapezoid(segment: &[f64], dt: f64, rho: f64) -> f64 {
    let m = segment.len() - 1;
    let w: Vec<f64> = segment
        .iter()
        .enumerate()
        .map(|(i, x)| (-rho * (m - i) as f64 * dt).exp() * x)
        .collect();
    crate::quadrature::trapezoid(&w, dt)
}

/// One step of the moving average, `segment` being the buffer before `x_next`
/// is pushed. Exactly propagates the trapezoid value of the integral.
pub fn update_moving_average(a: f64, segment: &SegmentBuffer, x_next: f64, dt: f64, rho: f64) -> f64 {
    let m = segment.len() - 1;
    let e = (-rho * dt).exp();
    let ed = (-rho * m as f64 * dt).exp();
    let x_now = segment.newest();
    e * a + 0.5 * dt * (e * x_now + x_next)
        - 0.5 * dt * ed * (e * segment.oldest() + segment.second_oldest())
}

/// Current state of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayState {
    pub t: f64,
    pub x: f64,
    pub a: f64,
    pub segment: SegmentBuffer,
}

impl DelayState {
    pub fn new(segment: &[f64], dt: f64, rho: f64) -> Self {
        Self {
            t: 0.0,
            x: *segment.last().expect("segment is non-empty"),
            a: moving_average_trapezoid(segment, dt, rho),
            segment: SegmentBuffer::from_values(segment),
        }
    }

    /// The delayed value X(t - delta).
    pub fn y(&self) -> f64 {
        self.segment.oldest()
    }

    /// Advance to `x_next` over one step of length `dt`.
    pub fn advance(&mut self, x_next: f64, dt: f64, rho: f64) {
        self.a = update_moving_average(self.a, &self.segment, x_next, dt, rho);
        self.segment.push(x_next);
        self.x = x_next;
        self.t += dt;
    }
}

pub type FeedbackFn = dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync;

/// Perturbation direction beta(t).
#[derive(Clone, PartialEq)]
pub enum Perturbation {
    Zero,
    /// `alpha` on the half-open window [start, end).
    Window { alpha: f64, start: f64, end: f64 },
    /// Grid values beta_k.
    Table(Arc<[f64]>),
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("Zero"),
            Self::Window { alpha, start, end } => write!(f, "Window({alpha} on [{start}, {end}))"),
            Self::Table(v) => write!(f, "Table(len {})", v.len()),
        }
    }
}

impl Perturbation {
    pub fn value(&self, k: usize, dt: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Window { alpha, start, end } => {
                let t = k as f64 * dt;
                let eps = 1e-9 * dt;
                if t >= start - eps && t < end - eps {
                    *alpha
                } else {
                    0.0
                }
            }
            Self::Table(v) => v.get(k).or(v.last()).copied().unwrap_or(0.0),
        }
    }
}

/// A control: evaluated along its own path, or perturbed around another control.
#[derive(Clone)]
pub enum ControlSpec {
    Constant(f64),
    /// Grid values u_k; the last value is held past the end of the table.
    OpenLoop(Arc<[f64]>),
    /// Feedback rule u(t, x, y, a).
    Feedback(Arc<FeedbackFn>),
    /// `factor * base` evaluated along this control's own path.
    Scaled { base: Box<ControlSpec>, factor: f64 },
    /// `u_k = base_k + s beta_k`, with `base_k` the base control recorded on the
    /// base path driven by the same noise.
    Perturbed { base: Box<ControlSpec>, beta: Perturbation, s: f64 },
}

impl fmt::Debug for ControlSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::OpenLoop(v) => write!(f, "OpenLoop(len {})", v.len()),
            Self::Feedback(_) => f.write_str("Feedback(..)"),
            Self::Scaled { base, factor } => write!(f, "Scaled({factor} x {base:?})"),
            Self::Perturbed { base, beta, s } => write!(f, "Perturbed({base:?} + {s} {beta:?})"),
        }
    }
}

impl ControlSpec {
    pub fn feedback<F: Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::Feedback(Arc::new(f))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::Scaled { base: Box::new(self.clone()), factor }
    }

    /// `self + s beta` as a process perturbation.
    pub fn perturbed(&self, beta: Perturbation, s: f64) -> Self {
        Self::Perturbed { base: Box::new(self.clone()), beta, s }
    }

    /// Unclipped value along a path; `None` for process perturbations.
    fn pathwise(&self, k: usize, t: f64, x: f64, y: f64, a: f64) -> Option<f64> {
        match self {
            Self::Constant(c) => Some(*c),
            Self::OpenLoop(v) => v.get(k).or(v.last()).copied(),
            Self::Feedback(f) => Some(f(t, x, y, a)),
            Self::Scaled { base, factor } => base.pathwise(k, t, x, y, a).map(|u| factor * u),
            Self::Perturbed { .. } => None,
        }
    }

    /// Structural identity (shared callbacks compare by pointer).
    pub fn same_as(&self, other: &ControlSpec) -> bool {
        match (self, other) {
            (Self::Constant(a), Self::Constant(b)) => a.to_bits() == b.to_bits(),
            (Self::OpenLoop(a), Self::OpenLoop(b)) => Arc::ptr_eq(a, b) || a == b,
            (Self::Feedback(a), Self::Feedback(b)) => Arc::ptr_eq(a, b),
            (Self::Scaled { base: a, factor: f }, Self::Scaled { base: b, factor: g }) => {
                f.to_bits() == g.to_bits() && a.same_as(b)
            }
            (
                Self::Perturbed { base: a, beta: p, s },
                Self::Perturbed { base: b, beta: q, s: r },
            ) => s.to_bits() == r.to_bits() && p == q && a.same_as(b),
            _ => false,
        }
    }
}

/// Result of [`bump_control`].
#[derive(Debug, Clone)]
pub struct Bumped {
    pub control: ControlSpec,
    /// The bumped value leaves the control set somewhere (known for
    /// constant and open-loop bases; feedback bases are clipped at run time).
    pub clipped: bool,
}

/// `base + alpha 1_{[s, s+h)}` as a process perturbation of `base`.
pub fn bump_control(
    base: &ControlSpec,
    alpha: f64,
    s: f64,
    h: f64,
    grid: &TimeGrid,
    control_set: &ControlSet,
) -> Result<Bumped> {
    let tol = 1e-9 * grid.dt;
    if !(s >= -tol && h >= 0.0 && s + h <= grid.horizon + tol) {
        return Err(Error::BadWindow { start: s, end: s + h, horizon: grid.horizon });
    }
    let beta = Perturbation::Window { alpha, start: s, end: s + h };
    let clipped = match base {
        ControlSpec::Constant(c) => alpha != 0.0 && h > 0.0 && !control_set.contains(c + alpha),
        ControlSpec::OpenLoop(v) => (0..=grid.n).any(|k| {
            let b = beta.value(k, grid.dt);
            b != 0.0 && !control_set.contains(v.get(k).or(v.last()).copied().unwrap_or(0.0) + b)
        }),
        _ => false,
    };
    if alpha == 0.0 {
        return Ok(Bumped { control: base.clone(), clipped: false });
    }
    Ok(Bumped { control: base.perturbed(beta, 1.0), clipped })
}

/// A jump of the compound Poisson process inside step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpEvent {
    pub step: u32,
    pub z: f64,
}

/// One simulated path on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRecord {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub u: Vec<f64>,
    /// Brownian increments, one per step.
    pub db: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
    /// First grid index outside the domain; the path is frozen from there.
    pub exit_step: Option<usize>,
    /// Steps at which the control was clipped to the control set.
    pub clipped_steps: usize,
}

impl PathRecord {
    /// The initial segment followed by the path: index k + m is time t_k.
    pub fn extended_x(&self, segment: &[f64]) -> Vec<f64> {
        let mut v = segment.to_vec();
        v.extend_from_slice(&self.x[1..]);
        v
    }

    pub fn point(&self, k: usize) -> Point {
        Point::new(self.t[k], self.x[k], self.y[k], self.a[k], self.u[k])
    }

    /// Index up to which the path is in the domain (inclusive).
    pub fn last_valid(&self) -> usize {
        match self.exit_step {
            Some(e) => e.saturating_sub(1),
            None => self.x.len() - 1,
        }
    }
}

/// The per-path random stream: ChaCha8 keyed by the seed, stream = path index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub path: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, path: u64) -> Self {
        Self { seed, path }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.path);
        r
    }
}

/// Noise of a single step.
#[derive(Debug, Clone, Default)]
struct StepNoise {
    db: f64,
    marks: Vec<f64>,
}

fn draw_step(rng: &mut ChaCha8Rng, spec: &ProblemSpec, sqrt_dt: f64, dt: f64, out: &mut StepNoise) {
    let z: f64 = rng.sample(StandardNormal);
    out.db = z * sqrt_dt;
    out.marks.clear();
    if let Some(j) = spec.jump.as_ref().filter(|_| spec.coeffs.has_jumps()) {
        let count = j.sample_count(dt, rng.random::<f64>());
        for _ in 0..count {
            out.marks.push(j.sample_mark(rng));
        }
    }
}

enum LaneKind {
    Direct(ControlSpec),
    FromLane { base: usize, beta: Perturbation, s: f64 },
}

struct Lane {
    kind: LaneKind,
    state: DelayState,
    u: f64,
    f_prev: f64,
    j: f64,
    exit: Option<usize>,
    clipped: usize,
    record: Option<PathRecord>,
}

/// What a lane produced over one path.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneOutcome {
    /// Trapezoid integral of f up to the exit step (or T).
    pub objective: f64,
    /// f at the last in-domain grid point.
    pub f_last: f64,
    pub x_last: f64,
    pub exit_step: Option<usize>,
    pub clipped_steps: usize,
    pub record: Option<PathRecord>,
}

fn resolve(kinds: &mut Vec<LaneKind>, c: &ControlSpec) -> Result<usize> {
    if let ControlSpec::Perturbed { base, beta, s } = c {
        let b = resolve(kinds, base)?;
        let pos = kinds.iter().position(|k| match k {
            LaneKind::FromLane { base: bb, beta: p, s: r } => *bb == b && p == beta && r.to_bits() == s.to_bits(),
            _ => false,
        });
        return Ok(pos.unwrap_or_else(|| {
            kinds.push(LaneKind::FromLane { base: b, beta: beta.clone(), s: *s });
            kinds.len() - 1
        }));
    }
    if let ControlSpec::Scaled { base, .. } = c {
        if matches!(**base, ControlSpec::Perturbed { .. }) {
            return Err(Error::InvalidParameter("scaling of a process perturbation is not supported".into()));
        }
    }
    let pos = kinds.iter().position(|k| matches!(k, LaneKind::Direct(d) if d.same_as(c)));
    Ok(pos.unwrap_or_else(|| {
        kinds.push(LaneKind::Direct(c.clone()));
        kinds.len() - 1
    }))
}

/// Simulate several controls in lockstep on one noise stream.
///
/// Process perturbations share the lane of their base control. With `record`
/// the full [`PathRecord`] of each requested control is returned as well.
pub fn simulate_lanes(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    controls: &[ControlSpec],
    noise: NoiseStream,
    record: bool,
) -> Result<Vec<LaneOutcome>> {
    let segment = spec.segment_on(grid)?;
    let mut kinds = Vec::new();
    let idx: Vec<usize> = controls.iter().map(|c| resolve(&mut kinds, c)).collect::<Result<_>>()?;
    let mut wanted = vec![false; kinds.len()];
    for &i in &idx {
        wanted[i] = true;
    }
    let n = grid.n;
    let dt = grid.dt;
    let mut lanes: Vec<Lane> = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| Lane {
            kind,
            state: DelayState::new(&segment, dt, spec.rho),
            u: 0.0,
            f_prev: 0.0,
            j: 0.0,
            exit: None,
            clipped: 0,
            record: (record && wanted[i]).then(|| PathRecord {
                t: Vec::with_capacity(n + 1),
                x: Vec::with_capacity(n + 1),
                y: Vec::with_capacity(n + 1),
                a: Vec::with_capacity(n + 1),
                u: Vec::with_capacity(n + 1),
                db: Vec::with_capacity(n),
                jumps: Vec::new(),
                exit_step: None,
                clipped_steps: 0,
            }),
        })
        .collect();

    let coeffs = &*spec.coeffs;
    let set = spec.control_set;
    let jumps_on = spec.has_jumps();
    let mut rng = noise.rng();
    let sqrt_dt = dt.sqrt();
    let mut step = StepNoise::default();
    for k in 0..=n {
        let t = grid.t(k);
        if k < n {
            draw_step(&mut rng, spec, sqrt_dt, dt, &mut step);
        }
        for li in 0..lanes.len() {
            if lanes[li].exit.is_some() {
                continue;
            }
            let (x, y, a) = {
                let s = &lanes[li].state;
                (s.x, s.y(), s.a)
            };
            let raw = match &lanes[li].kind {
                LaneKind::Direct(c) => c.pathwise(k, t, x, y, a).unwrap_or(0.0),
                LaneKind::FromLane { base, beta, s } => lanes[*base].u + s * beta.value(k, dt),
            };
            let (u, was_clipped) = set.clip(raw);
            let p = Point::new(t, x, y, a, u);
            let lane = &mut lanes[li];
            lane.u = u;
            if !coeffs.in_domain(&p) {
                lane.exit = Some(k);
                if let Some(r) = lane.record.as_mut() {
                    r.exit_step = Some(k);
                    // keep arrays full length: the path is frozen at its last value
                    while r.x.len() <= n {
                        let j = r.x.len();
                        r.t.push(grid.t(j));
                        r.x.push(x);
                        r.y.push(y);
                        r.a.push(a);
                        r.u.push(u);
                        if j < n {
                            r.db.push(0.0);
                        }
                    }
                }
                continue;
            }
            if was_clipped {
                lane.clipped += 1;
            }
            let f = coeffs.reward(&p);
            if k > 0 {
                lane.j += 0.5 * dt * (lane.f_prev + f);
            }
            lane.f_prev = f;
            if let Some(r) = lane.record.as_mut() {
                r.t.push(t);
                r.x.push(x);
                r.y.push(y);
                r.a.push(a);
                r.u.push(u);
            }
            if k == n {
                continue;
            }
            let mut drift = coeffs.drift(&p);
            if jumps_on {
                drift -= spec.compensator(&p);
            }
            let mut x_next = x + drift * dt + coeffs.diffusion(&p) * step.db;
            for &z in &step.marks {
                x_next += coeffs.jump(&p, z);
            }
            if !x_next.is_finite() {
                return Err(Error::NonFiniteState { step: k + 1 });
            }
            if let Some(r) = lane.record.as_mut() {
                r.db.push(step.db);
                for &z in &step.marks {
                    r.jumps.push(JumpEvent { step: k as u32, z });
                }
            }
            lane.state.advance(x_next, dt, spec.rho);
        }
    }
    Ok(idx
        .iter()
        .map(|&i| {
            let l = &lanes[i];
            let mut record = l.record.clone();
            if let Some(r) = record.as_mut() {
                r.clipped_steps = l.clipped;
            }
            LaneOutcome {
                objective: l.j,
                f_last: l.f_prev,
                x_last: l.state.x,
                exit_step: l.exit,
                clipped_steps: l.clipped,
                record,
            }
        })
        .collect())
}

/// Simulate one path of `control`.
pub fn simulate_path(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    control: &ControlSpec,
    noise: NoiseStream,
) -> Result<PathRecord> {
    let mut out = simulate_lanes(spec, grid, std::slice::from_ref(control), noise, true)?;
    Ok(out.pop().and_then(|o| o.record).expect("record requested"))
}

/// A set of simulated paths under one control.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: TimeGrid,
    /// The initial segment on the grid (m + 1 values).
    pub segment: Vec<f64>,
    pub paths: Vec<PathRecord>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Simulate `n_paths` paths in parallel; path `i` uses stream `(seed, i)`.
pub fn simulate_ensemble(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    control: &ControlSpec,
    n_paths: usize,
    seed: u64,
) -> Result<Ensemble> {
    let segment = spec.segment_on(grid)?;
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|i| simulate_path(spec, grid, control, NoiseStream::new(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { grid: *grid, segment, paths })
}

/// The variational process of a base path and its moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct Variational {
    /// xi_k, k = 0..=n.
    pub xi: Vec<f64>,
    /// Delayed values xi_{k-m} (zero for k < m).
    pub xi_delayed: Vec<f64>,
    /// Moving average of xi.
    pub xi_avg: Vec<f64>,
    /// beta_k.
    pub beta: Vec<f64>,
}

/// Euler scheme of the linearised equation along `base`, driven by the
/// base path's own Brownian increments and jumps. xi = 0 on [-delta, 0].
pub fn simulate_variational(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    base: &PathRecord,
    beta: &Perturbation,
) -> Result<Variational> {
    let n = grid.n;
    let m = grid.m;
    let dt = grid.dt;
    let coeffs = &*spec.coeffs;
    let jumps_on = spec.has_jumps();
    let mut state = DelayState::new(&vec![0.0; m + 1], dt, spec.rho);
    let mut out = Variational {
        xi: Vec::with_capacity(n + 1),
        xi_delayed: Vec::with_capacity(n + 1),
        xi_avg: Vec::with_capacity(n + 1),
        beta: (0..=n).map(|k| beta.value(k, dt)).collect(),
    };
    let stop = base.last_valid();
    let mut jump_iter = base.jumps.iter().peekable();
    for k in 0..=n {
        out.xi.push(state.x);
        out.xi_delayed.push(state.y());
        out.xi_avg.push(state.a);
        if k == n {
            break;
        }
        if k >= stop {
            state.advance(state.x, dt, spec.rho);
            continue;
        }
        let p = base.point(k);
        let lin = |g: Grad| g.x * state.x + g.y * state.y() + g.a * state.a + g.u * out.beta[k];
        let mut drift = lin(coeffs.drift_grad(&p));
        if jumps_on {
            let j = spec.jump.as_ref().expect("jumps on");
            drift -= j.integrate(|z| lin(coeffs.jump_grad(&p, z)));
        }
        let mut next = state.x + drift * dt + lin(coeffs.diffusion_grad(&p)) * base.db[k];
        while let Some(ev) = jump_iter.peek() {
            if ev.step as usize != k {
                break;
            }
            next += lin(coeffs.jump_grad(&p, ev.z));
            jump_iter.next();
        }
        if !next.is_finite() {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
        state.advance(next, dt, spec.rho);
    }
    Ok(out)
}

/// Pathwise chain-rule derivative `int (f_x xi + f_y xi(t-delta) + f_a Xi + f_u beta) dt`.
pub fn xi_objective_derivative(spec: &ProblemSpec, grid: &TimeGrid, base: &PathRecord, v: &Variational) -> f64 {
    let stop = base.last_valid();
    let vals: Vec<f64> = (0..=stop.min(grid.n))
        .map(|k| {
            let g = spec.coeffs.reward_grad(&base.point(k));
            g.x * v.xi[k] + g.y * v.xi_delayed[k] + g.a * v.xi_avg[k] + g.u * v.beta[k]
        })
        .collect();
    crate::quadrature::trapezoid(&vals, grid.dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        linear_quadratic, make_grid, ControlSet, InitialSegment, JumpModel, LqParams, MarkDistribution,
        ZeroCoeffs,
    };

    fn lq_spec(p: LqParams, delta: f64) -> ProblemSpec {
        ProblemSpec::new(
            delta,
            1.0,
            Arc::new(linear_quadratic(&p)),
            ControlSet::unbounded(),
            InitialSegment::Constant(1.0),
        )
        .unwrap()
    }

    #[test]
    fn ring_buffer_order() {
        let mut b = SegmentBuffer::from_values(&[1.0, 2.0, 3.0]);
        assert_eq!(b.push(4.0), 1.0);
        assert_eq!(b.to_vec(), vec![2.0, 3.0, 4.0]);
        assert_eq!((b.oldest(), b.second_oldest(), b.newest()), (2.0, 3.0, 4.0));
    }

    #[test]
    fn constant_path_without_dynamics() {
        let spec = ProblemSpec::new(1.0, 1.0, Arc::new(ZeroCoeffs), ControlSet::unbounded(), InitialSegment::Constant(2.5)).unwrap();
        let grid = make_grid(1.0, 0.1, 3.0).unwrap();
        let r = simulate_path(&spec, &grid, &ControlSpec::Constant(0.0), NoiseStream::new(1, 0)).unwrap();
        assert!(r.x.iter().all(|&x| x == 2.5));
        let w: f64 = (0..=10).map(|i| if i == 0 || i == 10 { 0.5 } else { 1.0 } * (-0.1 * i as f64).exp()).sum();
        for k in 0..=grid.n {
            assert!((r.a[k] - 2.5 * 0.1 * w).abs() < 1e-12);
        }
        let steady = 2.5 * (1.0 - (-1f64).exp());
        assert!((r.a[5] - steady).abs() < 2e-3);
    }

    #[test]
    fn exponential_growth() {
        let spec = lq_spec(LqParams { bx: 0.05, ..Default::default() }, 0.5);
        let grid = make_grid(0.5, 1e-3, 1.0).unwrap();
        let r = simulate_path(&spec, &grid, &ControlSpec::Constant(0.0), NoiseStream::new(0, 0)).unwrap();
        assert!((r.x[grid.n] - 0.05f64.exp()).abs() < 1e-4);
    }

    #[test]
    fn moving_average_limits() {
        let grid = make_grid(1.0, 0.01, 1.0).unwrap();
        let seg = vec![3.0; grid.m + 1];
        let mut s = DelayState::new(&seg, grid.dt, 1e-12);
        assert!((s.a - 3.0).abs() < 1e-8);
        for _ in 0..50 {
            s.advance(3.0, grid.dt, 1e-12);
        }
        assert!((s.a - 3.0).abs() < 1e-8);
    }

    #[test]
    fn moving_average_tracks_trapezoid() {
        let grid = make_grid(1.0, 0.05, 3.0).unwrap();
        let seg: Vec<f64> = (0..=grid.m).map(|i| grid.seg_time(i)).collect();
        let mut s = DelayState::new(&seg, grid.dt, 1.0);
        let mut hist = seg.clone();
        for k in 1..=grid.n {
            let x = grid.t(k);
            s.advance(x, grid.dt, 1.0);
            hist.push(x);
            let window = &hist[hist.len() - grid.m - 1..];
            let oracle = moving_average_trapezoid(window, grid.dt, 1.0);
            assert!((s.a - oracle).abs() < 5.0 * grid.dt * grid.dt, "k = {k}");
        }
    }

    #[test]
    fn bump_examples() {
        let grid = make_grid(1.0, 0.1, 5.0).unwrap();
        let set = ControlSet::new(0.0, 0.55).unwrap();
        let b = bump_control(&ControlSpec::Constant(0.5), 0.1, 1.0, 1.0, &grid, &ControlSet::unbounded()).unwrap();
        let ControlSpec::Perturbed { beta, .. } = &b.control else { panic!() };
        assert_eq!(beta.value(15, grid.dt), 0.1);
        assert_eq!(beta.value(5, grid.dt), 0.0);
        assert!(!b.clipped);
        assert!(bump_control(&ControlSpec::Constant(0.5), 0.1, 1.0, 1.0, &grid, &set).unwrap().clipped);
        assert!(matches!(
            bump_control(&ControlSpec::Constant(0.5), 0.1, 4.5, 1.0, &grid, &set),
            Err(Error::BadWindow { .. })
        ));
        let same = bump_control(&ControlSpec::Constant(0.5), 0.0, 1.0, 1.0, &grid, &set).unwrap();
        assert!(same.control.same_as(&ControlSpec::Constant(0.5)));
    }

    #[test]
    fn zero_perturbation_has_zero_variation() {
        let spec = lq_spec(LqParams { bx: 0.1, by: 0.2, sx: 0.3, bu: 1.0, ..Default::default() }, 0.5);
        let grid = make_grid(0.5, 0.01, 2.0).unwrap();
        let r = simulate_path(&spec, &grid, &ControlSpec::Constant(0.1), NoiseStream::new(3, 2)).unwrap();
        let v = simulate_variational(&spec, &grid, &r, &Perturbation::Zero).unwrap();
        assert!(v.xi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn variation_of_constants() {
        let mu = 0.3;
        let spec = lq_spec(LqParams { bx: mu, bu: 1.0, ..Default::default() }, 0.5);
        let grid = make_grid(0.5, 1e-3, 2.0).unwrap();
        let r = simulate_path(&spec, &grid, &ControlSpec::Constant(0.0), NoiseStream::new(0, 0)).unwrap();
        let beta = Perturbation::Table(vec![1.0; grid.n + 1].into());
        let v = simulate_variational(&spec, &grid, &r, &beta).unwrap();
        let exact = ((mu * 2.0).exp() - 1.0) / mu;
        assert!((v.xi[grid.n] - exact).abs() < 5e-3);
    }

    #[test]
    fn lanes_share_noise() {
        let spec = lq_spec(LqParams { bx: 0.1, sx: 0.2, bu: 1.0, ..Default::default() }, 0.5);
        let grid = make_grid(0.5, 0.01, 1.0).unwrap();
        let c = ControlSpec::Constant(0.2);
        let out = simulate_lanes(&spec, &grid, &[c.clone(), c.clone()], NoiseStream::new(9, 4), true).unwrap();
        assert_eq!(out[0], out[1]);
        let alone = simulate_path(&spec, &grid, &c, NoiseStream::new(9, 4)).unwrap();
        assert_eq!(out[0].record.as_ref().unwrap(), &alone);
    }

    #[test]
    fn jumps_are_recorded() {
        let spec = ProblemSpec::new(
            0.5,
            1.0,
            Arc::new(crate::model::PolynomialCoeffs {
                jump: crate::model::Polynomial::new(vec![crate::model::Monomial::new(1.0, 0, 0, 0, 0)]),
                ..Default::default()
            }),
            ControlSet::unbounded(),
            InitialSegment::Constant(1.0),
        )
        .unwrap()
        .with_jump(Some(JumpModel::new(2.0, MarkDistribution::Discrete { values: vec![-1.0, 1.0], probs: vec![0.5, 0.5] }).unwrap()));
        let grid = make_grid(0.5, 0.01, 5.0).unwrap();
        let r = simulate_path(&spec, &grid, &ControlSpec::Constant(0.0), NoiseStream::new(1, 1)).unwrap();
        let total: f64 = r.jumps.iter().map(|j| j.z).sum();
        assert!((r.x[grid.n] - 1.0 - total).abs() < 1e-12);
        assert!(!r.jumps.is_empty());
    }
}

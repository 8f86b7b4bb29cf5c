//! Picard iteration for time-advanced backward equations
//! `dp = E[F(t, p(t), p(t+delta), p_t, q(t), ..., r_t) | F_t] dt + q dB + int r dN~`,
//! with p = q = r = 0 beyond the truncation horizon.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Ensemble, NoiseStream};
use crate::model::{JumpModel, TimeGrid};
use crate::regression::SliceBasis;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Conditional expectation is the identity; q = r = 0.
    #[default]
    Deterministic,
    /// Least-squares regression on (X, Y, A) per time slice.
    Regression,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every argument is read from the previous iterate.
    Picard,
    /// Advanced arguments are read from the current backward sweep; the value
    /// at t itself comes from a Heun predictor.
    #[default]
    Sweep,
}

/// Grid values of `dim` components over `paths` paths, with zero padding up to
/// index n + m.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dim: usize,
    len: usize,
    paths: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(dim: usize, len: usize, paths: usize) -> Self {
        Self { dim, len, paths, data: vec![0.0; dim * len * paths] }
    }

    #[inline]
    fn idx(&self, c: usize, k: usize, j: usize) -> usize {
        (c * self.len + k) * self.paths + j
    }

    /// Component `c` at grid index `k` on path `j`; zero past the end.
    #[inline]
    pub fn get(&self, c: usize, k: usize, j: usize) -> f64 {
        if k >= self.len {
            0.0
        } else {
            self.data[self.idx(c, k, j)]
        }
    }

    #[inline]
    pub fn set(&mut self, c: usize, k: usize, j: usize, v: f64) {
        let i = self.idx(c, k, j);
        self.data[i] = v;
    }

    /// All paths of component `c` at index `k`.
    pub fn slice(&self, c: usize, k: usize) -> &[f64] {
        let i = self.idx(c, k, 0);
        &self.data[i..i + self.paths]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Path average of component `c` at `k`.
    pub fn mean(&self, c: usize, k: usize) -> f64 {
        crate::stats::compensated_sum(self.slice(c, k).iter().copied()) / self.paths as f64
    }
}

/// One iterate (p, q, r). `r` has `dim * n_atoms` components, atom-minor.
#[derive(Debug, Clone, PartialEq)]
struct Iterate {
    p: Field,
    q: Field,
    r: Field,
    n_atoms: usize,
}

impl Iterate {
    fn zeros(dim: usize, len: usize, paths: usize, n_atoms: usize) -> Self {
        Self {
            p: Field::zeros(dim, len, paths),
            q: Field::zeros(dim, len, paths),
            r: Field::zeros(dim * n_atoms.max(1), len, paths),
            n_atoms,
        }
    }
}

/// Read access for a driver evaluated at grid index `k` on one path.
///
/// Only indices at or after `k` are reachable, so an assembled driver cannot
/// read adjoint values from the past.
pub struct DriverCtx<'a> {
    pub k: usize,
    pub t: f64,
    pub path: usize,
    pub grid: &'a TimeGrid,
    p: &'a Field,
    qr: &'a Iterate,
}

impl DriverCtx<'_> {
    #[inline]
    pub fn p_at(&self, c: usize, ahead: usize) -> f64 {
        self.p.get(c, self.k + ahead, self.path)
    }
    #[inline]
    pub fn p_now(&self, c: usize) -> f64 {
        self.p_at(c, 0)
    }
    /// p(t + delta).
    #[inline]
    pub fn p_adv(&self, c: usize) -> f64 {
        self.p_at(c, self.grid.m)
    }
    /// The segment p(t), ..., p(t + delta).
    pub fn p_seg(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..=self.grid.m).map(move |d| self.p_at(c, d))
    }
    #[inline]
    pub fn q_at(&self, c: usize, ahead: usize) -> f64 {
        self.qr.q.get(c, self.k + ahead, self.path)
    }
    #[inline]
    pub fn q_now(&self, c: usize) -> f64 {
        self.q_at(c, 0)
    }
    #[inline]
    pub fn q_adv(&self, c: usize) -> f64 {
        self.q_at(c, self.grid.m)
    }
    pub fn q_seg(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..=self.grid.m).map(move |d| self.q_at(c, d))
    }
    #[inline]
    pub fn r_at(&self, c: usize, atom: usize, ahead: usize) -> f64 {
        if self.qr.n_atoms == 0 {
            return 0.0;
        }
        self.qr.r.get(c * self.qr.n_atoms + atom, self.k + ahead, self.path)
    }
    pub fn n_atoms(&self) -> usize {
        self.qr.n_atoms
    }
    /// r(t, .) of component `c` as atom values.
    pub fn r_now(&self, c: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.r_at(c, i, 0);
        }
    }
    pub fn r_adv(&self, c: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.r_at(c, i, self.grid.m);
        }
    }
}

/// A driver `F(t, p(t), p(t+delta), p_t, q(t), q(t+delta), q_t, r(t), r(t+delta), r_t)`.
pub trait AdvancedDriver: Sync {
    fn dim(&self) -> usize {
        1
    }
    /// Declared Lipschitz constant C.
    fn lipschitz(&self) -> f64;
    /// Whether F reads q or r. Drivers that do not skip the inner iteration.
    fn uses_qr(&self) -> bool {
        false
    }
    /// Whether component `c` carries a Brownian integrand.
    fn has_diffusion(&self, _c: usize) -> bool {
        true
    }
    /// Whether component `c` carries a jump integrand.
    fn has_jumps(&self, _c: usize) -> bool {
        true
    }
    fn eval(&self, ctx: &DriverCtx<'_>, out: &mut [f64]);
}

/// Simulated paths the conditional expectations are taken along.
#[derive(Debug, Clone, Copy)]
pub struct McContext<'a> {
    pub ensemble: &'a Ensemble,
    pub jump: Option<&'a JumpModel>,
}

/// Starting iterate p^0 (q^0 = r^0 = 0 always).
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zero,
    Constant(f64),
    /// Independent uniform values in [-scale, scale].
    Random { seed: u64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub mode: Mode,
    pub schedule: Schedule,
    /// Weight of the e^{lambda t} norm; `None` selects it by the epsilon rule.
    pub weight_lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub inner_max_iter: usize,
    pub basis_degree: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Deterministic,
            schedule: Schedule::Sweep,
            weight_lambda: None,
            tol: 1e-20,
            max_iter: 100,
            inner_max_iter: 50,
            basis_degree: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    /// d_n = int e^{lambda t} E|p^n - p^{n-1}|^2 (+ q and nu-weighted r terms) dt.
    pub distances: Vec<f64>,
    /// d_{n+1} / d_n.
    pub ratios: Vec<f64>,
    pub inner_iterations: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Converged at the round-off floor rather than at `tol`.
    #[serde(default)]
    pub stalled: bool,
    pub weight_lambda: f64,
    /// Distances are scaled by e^{-weight_log_offset} to stay finite.
    pub weight_log_offset: f64,
    pub tol: f64,
    pub schedule: Schedule,
    pub mode: Mode,
}

/// Solution on the grid; p, q, r vanish past the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTriple {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_atoms: usize,
    pub p: Field,
    pub q: Field,
    /// Component `c * n_atoms + i` holds r of component `c` on atom `i`.
    pub r: Field,
}

impl AdjointTriple {
    pub fn paths(&self) -> usize {
        self.p.paths()
    }
    pub fn p(&self, c: usize, k: usize, j: usize) -> f64 {
        self.p.get(c, k, j)
    }
    pub fn q(&self, c: usize, k: usize, j: usize) -> f64 {
        self.q.get(c, k, j)
    }
    pub fn r(&self, c: usize, atom: usize, k: usize, j: usize) -> f64 {
        if self.n_atoms == 0 {
            0.0
        } else {
            self.r.get(c * self.n_atoms + atom, k, j)
        }
    }
    /// r of component `c` at (k, j) as atom values.
    pub fn r_vec(&self, c: usize, k: usize, j: usize) -> Vec<f64> {
        (0..self.n_atoms).map(|i| self.r(c, i, k, j)).collect()
    }
    /// Path average of p_c over k = 0..=n.
    pub fn mean_p(&self, c: usize) -> Vec<f64> {
        (0..=self.grid.n).map(|k| self.p.mean(c, k)).collect()
    }
    pub fn mean_q(&self, c: usize) -> Vec<f64> {
        (0..=self.grid.n).map(|k| self.q.mean(c, k)).collect()
    }
    pub fn mean_r(&self, c: usize, atom: usize) -> Vec<f64> {
        if self.n_atoms == 0 {
            return vec![0.0; self.grid.n + 1];
        }
        (0..=self.grid.n).map(|k| self.r.mean(c * self.n_atoms + atom, k)).collect()
    }
}

/// Sufficient weight by the epsilon rule: 1.1 times the root of
/// `lambda = 12 C (2 + e^{-lambda delta})`.
pub fn lambda_star(c: f64, delta: f64) -> f64 {
    if !(c > 0.0) {
        return 0.0;
    }
    let g = |l: f64| l - 12.0 * c * (2.0 + (-l * delta).exp());
    let (mut lo, mut hi) = (24.0 * c, 36.0 * c);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    1.1 * 0.5 * (lo + hi)
}

/// `epsilon = 1 / (12 (2 + e^{-lambda delta}))`.
pub fn epsilon_rule(lambda: f64, delta: f64) -> f64 {
    1.0 / (12.0 * (2.0 + (-lambda * delta).exp()))
}

struct Engine<'a> {
    driver: &'a dyn AdvancedDriver,
    grid: &'a TimeGrid,
    settings: SolverSettings,
    dim: usize,
    paths: usize,
    len: usize,
    n_atoms: usize,
    rates: Vec<f64>,
    features: Option<Vec<Vec<[f64; 3]>>>,
    bases: Vec<Option<SliceBasis>>,
    db: Option<Vec<Vec<f64>>>,
    jump_atoms: Vec<Vec<(usize, usize)>>,
    weights: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(
        driver: &'a dyn AdvancedDriver,
        grid: &'a TimeGrid,
        settings: SolverSettings,
        mc: Option<&McContext<'_>>,
        weight_lambda: f64,
        log_offset: f64,
    ) -> Result<Self> {
        let dim = driver.dim();
        let regression = settings.mode == Mode::Regression;
        if regression && mc.is_none() {
            return Err(Error::InvalidParameter("regression mode needs a simulated ensemble".into()));
        }
        let paths = mc.map(|c| c.ensemble.len()).unwrap_or(1).max(1);
        let len = grid.n + grid.m + 1;
        let jump = mc.and_then(|c| c.jump).filter(|j| j.intensity > 0.0);
        let n_atoms = if regression { jump.map(|j| j.n_atoms()).unwrap_or(0) } else { 0 };
        let rates = (0..n_atoms).map(|i| jump.expect("atoms imply jumps").atom_rate(i)).collect();
        let mut features = None;
        let mut bases = Vec::new();
        let mut db = None;
        let mut jump_atoms = Vec::new();
        if regression {
            let ens = mc.expect("checked").ensemble;
            if ens.grid.n < grid.n || (ens.grid.dt - grid.dt).abs() > 1e-12 * grid.dt {
                return Err(Error::InvalidParameter("ensemble grid does not cover the solver grid".into()));
            }
            let feats: Vec<Vec<[f64; 3]>> = (0..=grid.n)
                .map(|k| ens.paths.iter().map(|p| [p.x[k], p.y[k], p.a[k]]).collect())
                .collect();
            bases = feats
                .iter()
                .map(|f| SliceBasis::fit(f, settings.basis_degree).map(Some))
                .collect::<Result<_>>()?;
            db = Some((0..grid.n).map(|k| ens.paths.iter().map(|p| p.db[k]).collect()).collect());
            features = Some(feats);
            if let Some(j) = jump {
                jump_atoms = ens
                    .paths
                    .iter()
                    .map(|p| p.jumps.iter().map(|e| (e.step as usize, j.atom_of(e.z))).collect())
                    .collect();
            }
        }
        let weights = (0..=grid.n)
            .map(|k| {
                let end = if k == 0 || k == grid.n { 0.5 } else { 1.0 };
                end * grid.dt * (weight_lambda * grid.t(k) - log_offset).exp()
            })
            .collect();
        Ok(Self {
            driver,
            grid,
            settings,
            dim,
            paths,
            len,
            n_atoms,
            rates,
            features,
            bases,
            db,
            jump_atoms,
            weights,
        })
    }

    fn zeros(&self) -> Iterate {
        Iterate::zeros(self.dim, self.len, self.paths, self.n_atoms)
    }

    fn init(&self, init: &Init) -> Iterate {
        let mut it = self.zeros();
        match init {
            Init::Zero => {}
            Init::Constant(v) => {
                for c in 0..self.dim {
                    for k in 0..self.grid.n {
                        for j in 0..self.paths {
                            it.p.set(c, k, j, *v);
                        }
                    }
                }
            }
            Init::Random { seed, scale } => {
                let mut rng = NoiseStream::new(*seed, u64::MAX).rng();
                for c in 0..self.dim {
                    for k in 0..self.grid.n {
                        for j in 0..self.paths {
                            it.p.set(c, k, j, scale * (2.0 * rng.random::<f64>() - 1.0));
                        }
                    }
                }
            }
        }
        it
    }

    fn eval_slice(&self, k: usize, p: &Field, qr: &Iterate, out: &mut [f64]) {
        let dim = self.dim;
        let t = self.grid.t(k);
        let f = |j: usize, o: &mut [f64]| {
            let ctx = DriverCtx { k, t, path: j, grid: self.grid, p, qr };
            self.driver.eval(&ctx, o);
        };
        if self.paths >= 64 {
            out.par_chunks_mut(dim).enumerate().for_each(|(j, o)| f(j, o));
        } else {
            out.chunks_mut(dim).enumerate().for_each(|(j, o)| f(j, o));
        }
    }

    fn project(&self, k: usize, y: &[f64], out: &mut [f64]) {
        match (&self.bases.get(k), &self.features) {
            (Some(Some(b)), Some(f)) => b.project(&f[k], y, out),
            _ => out.copy_from_slice(y),
        }
    }

    /// Jump counts per atom on path `j` during step `k`.
    fn counts(&self, j: usize, k: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(ev) = self.jump_atoms.get(j) {
            let start = ev.partition_point(|e| e.0 < k);
            for e in &ev[start..] {
                if e.0 != k {
                    break;
                }
                out[e.1] += 1.0;
            }
        }
    }

    /// One backward sweep. `p_args` supplies the p-arguments (Picard) or `None`
    /// to read them from the sweep itself; `qr_args` likewise for q and r.
    fn sweep(&self, p_args: Option<&Field>, qr_args: Option<&Iterate>) -> Result<Iterate> {
        let n = self.grid.n;
        let dt = self.grid.dt;
        let dim = self.dim;
        let pn = self.paths;
        let regression = self.settings.mode == Mode::Regression;
        let mut cur = self.zeros();
        let mut f_next = vec![0.0; pn * dim];
        let mut f_now = vec![0.0; pn * dim];
        let mut tmp = vec![0.0; pn];
        let mut fitted = vec![0.0; pn];
        let mut counts = vec![0.0; self.n_atoms];
        let mut cnt_all = vec![vec![0.0; self.n_atoms]; pn];
        // F at the terminal index
        {
            let p = p_args.unwrap_or(&cur.p);
            let qr = qr_args.unwrap_or(&cur);
            self.eval_slice(n, p, qr, &mut f_next);
        }
        for k in (0..n).rev() {
            if p_args.is_none() && k + 1 < n {
                let p = &cur.p;
                let qr = qr_args.unwrap_or(&cur);
                self.eval_slice(k + 1, p, qr, &mut f_next);
            }
            // q and r from p_{k+1}
            if regression {
                let db = &self.db.as_ref().expect("regression data")[k];
                for (j, c) in cnt_all.iter_mut().enumerate() {
                    self.counts(j, k, &mut counts);
                    c.copy_from_slice(&counts);
                }
                for c in 0..dim {
                    let next = cur.p.slice(c, k + 1).to_vec();
                    if self.driver.has_diffusion(c) {
                        for j in 0..pn {
                            tmp[j] = next[j] * db[j] / dt;
                        }
                        self.project(k, &tmp, &mut fitted);
                        for j in 0..pn {
                            cur.q.set(c, k, j, fitted[j]);
                        }
                    }
                    if self.driver.has_jumps(c) {
                        for i in 0..self.n_atoms {
                            let nu = self.rates[i] * dt;
                            for j in 0..pn {
                                tmp[j] = next[j] * (cnt_all[j][i] - nu) / nu;
                            }
                            self.project(k, &tmp, &mut fitted);
                            for j in 0..pn {
                                cur.r.set(c * self.n_atoms + i, k, j, fitted[j]);
                            }
                        }
                    }
                }
            }
            if p_args.is_none() {
                // Heun predictor for the value at k
                for c in 0..dim {
                    for j in 0..pn {
                        tmp[j] = cur.p.get(c, k + 1, j) - dt * f_next[j * dim + c];
                    }
                    self.project(k, &tmp, &mut fitted);
                    for j in 0..pn {
                        cur.p.set(c, k, j, fitted[j]);
                    }
                }
            }
            {
                let p = p_args.unwrap_or(&cur.p);
                let qr = qr_args.unwrap_or(&cur);
                self.eval_slice(k, p, qr, &mut f_now);
            }
            for c in 0..dim {
                for j in 0..pn {
                    tmp[j] = cur.p.get(c, k + 1, j) - 0.5 * dt * (f_next[j * dim + c] + f_now[j * dim + c]);
                }
                self.project(k, &tmp, &mut fitted);
                for j in 0..pn {
                    if !fitted[j].is_finite() {
                        return Err(Error::NonFinite("backward sweep"));
                    }
                    cur.p.set(c, k, j, fitted[j]);
                }
            }
            std::mem::swap(&mut f_next, &mut f_now);
        }
        Ok(cur)
    }

    fn distance(&self, a: &Iterate, b: &Iterate, with_p: bool) -> f64 {
        let mut acc = crate::stats::KahanSum::new();
        for k in 0..=self.grid.n {
            let mut s = 0.0;
            for j in 0..self.paths {
                for c in 0..self.dim {
                    if with_p {
                        let d = a.p.get(c, k, j) - b.p.get(c, k, j);
                        s += d * d;
                    }
                    let d = a.q.get(c, k, j) - b.q.get(c, k, j);
                    s += d * d;
                    for i in 0..self.n_atoms {
                        let ci = c * self.n_atoms + i;
                        let d = a.r.get(ci, k, j) - b.r.get(ci, k, j);
                        s += self.rates[i] * d * d;
                    }
                }
            }
            acc.add(self.weights[k] * s / self.paths as f64);
        }
        acc.value()
    }

    /// One outer step: inner iteration on (q, r) with the p-arguments frozen.
    fn outer(&self, prev: &Iterate) -> Result<(Iterate, usize)> {
        let p_args = match self.settings.schedule {
            Schedule::Picard => Some(&prev.p),
            Schedule::Sweep => None,
        };
        let inner_needed = self.driver.uses_qr() && self.settings.mode == Mode::Regression;
        if !inner_needed {
            let qr = match self.settings.schedule {
                Schedule::Picard => Some(prev),
                Schedule::Sweep => None,
            };
            return Ok((self.sweep(p_args, qr)?, 1));
        }
        let mut qr_prev = prev.clone();
        let mut d_max = 0.0f64;
        for it in 1..=self.settings.inner_max_iter.max(1) {
            let next = match self.settings.schedule {
                Schedule::Picard => self.sweep(p_args, Some(&qr_prev))?,
                Schedule::Sweep => self.sweep(None, None)?,
            };
            let d = self.distance(&next, &qr_prev, false);
            if self.settings.schedule == Schedule::Sweep || d <= self.settings.tol.max(STALL_REDUCTION * d_max) {
                return Ok((next, it));
            }
            d_max = d_max.max(d);
            qr_prev = next;
        }
        Ok((qr_prev, self.settings.inner_max_iter))
    }
}

/// Distances this far below the largest one are round-off; stagnation there
/// counts as convergence.
const STALL_REDUCTION: f64 = 1e-16;

/// Solve the backward equation by Picard iteration from `init`.
pub fn picard_solve(
    driver: &dyn AdvancedDriver,
    grid: &TimeGrid,
    settings: &SolverSettings,
    mc: Option<&McContext<'_>>,
    init: &Init,
) -> Result<(AdjointTriple, PicardReport)> {
    let lambda = settings.weight_lambda.unwrap_or_else(|| lambda_star(driver.lipschitz(), grid.delta));
    let log_offset = (lambda * grid.horizon - 600.0).max(0.0);
    let engine = Engine::new(driver, grid, *settings, mc, lambda, log_offset)?;
    let mut report = PicardReport {
        distances: Vec::new(),
        ratios: Vec::new(),
        inner_iterations: Vec::new(),
        iterations: 0,
        converged: false,
        stalled: false,
        weight_lambda: lambda,
        weight_log_offset: log_offset,
        tol: settings.tol,
        schedule: settings.schedule,
        mode: settings.mode,
    };
    let mut prev = engine.init(init);
    let mut above_one = 0;
    let mut flat = 0;
    let mut d_max = 0.0f64;
    for _ in 0..settings.max_iter.max(1) {
        let (next, inner) = match engine.outer(&prev) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                report.distances.push(f64::INFINITY);
                return Err(Error::NoConvergence { report: Box::new(report) });
            }
            Err(e) => return Err(e),
        };
        let d = engine.distance(&next, &prev, true);
        report.iterations += 1;
        report.inner_iterations.push(inner);
        if let Some(&last) = report.distances.last() {
            let ratio = if last == 0.0 {
                if d == 0.0 { 0.0 } else { f64::INFINITY }
            } else {
                d / last
            };
            report.ratios.push(ratio);
            above_one = if ratio >= 1.0 { above_one + 1 } else { 0 };
            flat = if ratio >= 0.5 && d <= STALL_REDUCTION * d_max { flat + 1 } else { 0 };
        }
        d_max = d_max.max(d);
        report.distances.push(d);
        prev = next;
        if !d.is_finite() {
            return Err(Error::NoConvergence { report: Box::new(report) });
        }
        if d <= settings.tol {
            report.converged = true;
            break;
        }
        if flat >= 3 {
            report.converged = true;
            report.stalled = true;
            break;
        }
        if above_one >= 3 {
            return Err(Error::BadWeight { report: Box::new(report) });
        }
    }
    if !report.converged {
        return Err(Error::NoConvergence { report: Box::new(report) });
    }
    let triple = AdjointTriple {
        grid: *grid,
        dim: engine.dim,
        n_atoms: engine.n_atoms,
        p: prev.p,
        q: prev.q,
        r: prev.r,
    };
    Ok((triple, report))
}

/// Theory-versus-measurement summary of a Picard run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionVerdict {
    pub lipschitz: f64,
    pub lambda_star: f64,
    pub epsilon: f64,
    pub lambda_used: f64,
    /// Largest d_{n+1}/d_n from the second ratio on, above the round-off
    /// floor (0 when not available).
    pub measured_ratio: f64,
    /// measured_ratio <= 1/2 + 0.1.
    pub within_half: bool,
    /// The weight used is below the sufficient value C / epsilon.
    pub bad_weight_risk: bool,
}

pub fn contraction_diagnostics(report: &PicardReport, lipschitz: f64, delta: f64) -> ContractionVerdict {
    let ls = lambda_star(lipschitz, delta);
    let eps = epsilon_rule(ls, delta);
    // ratios taken in the round-off region say nothing about contraction
    let d_max = report.distances.iter().copied().fold(0.0, f64::max);
    let measured = report
        .ratios
        .iter()
        .zip(report.distances.iter().skip(1))
        .skip(1)
        .filter(|(_, d)| **d > STALL_REDUCTION * d_max)
        .map(|(r, _)| *r)
        .fold(0.0, f64::max);
    ContractionVerdict {
        lipschitz,
        lambda_star: ls,
        epsilon: eps,
        lambda_used: report.weight_lambda,
        measured_ratio: measured,
        within_half: measured <= 0.6,
        bad_weight_risk: report.weight_lambda < ls / 1.1 * (1.0 - 1e-12),
    }
}

/// Distance between solutions from two initialisations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    /// Weighted squared distance between the two converged solutions.
    pub distance: f64,
    pub tol: f64,
    /// distance <= 10 tol.
    pub indistinguishable: bool,
    pub reports: [PicardReport; 2],
}

pub fn uniqueness_probe(
    driver: &dyn AdvancedDriver,
    grid: &TimeGrid,
    settings: &SolverSettings,
    mc: Option<&McContext<'_>>,
    inits: [&Init; 2],
) -> Result<UniquenessReport> {
    let (a, ra) = picard_solve(driver, grid, settings, mc, inits[0])?;
    let (b, rb) = picard_solve(driver, grid, settings, mc, inits[1])?;
    let distance = weighted_distance(&a, &b, ra.weight_lambda, mc.and_then(|c| c.jump));
    Ok(UniquenessReport {
        distance,
        tol: settings.tol,
        indistinguishable: distance <= 10.0 * settings.tol,
        reports: [ra, rb],
    })
}

/// `int e^{lambda t} E(|dp|^2 + |dq|^2 + int |dr|^2 nu) dt` by the trapezoid rule.
pub fn weighted_distance(a: &AdjointTriple, b: &AdjointTriple, lambda: f64, jump: Option<&JumpModel>) -> f64 {
    let g = &a.grid;
    let mut acc = crate::stats::KahanSum::new();
    for k in 0..=g.n {
        let w = if k == 0 || k == g.n { 0.5 } else { 1.0 } * g.dt * (lambda * g.t(k)).exp();
        let mut s = 0.0;
        for j in 0..a.paths() {
            for c in 0..a.dim {
                s += (a.p(c, k, j) - b.p(c, k, j)).powi(2) + (a.q(c, k, j) - b.q(c, k, j)).powi(2);
                for i in 0..a.n_atoms {
                    let nu = jump.map(|jm| jm.atom_rate(i)).unwrap_or(0.0);
                    s += nu * (a.r(c, i, k, j) - b.r(c, i, k, j)).powi(2);
                }
            }
        }
        acc.add(w * s / a.paths() as f64);
    }
    acc.value()
}

/// Driver `c1 p(t) + c2 p(t + delta) + g(t)`.
pub struct LinearAdvancedDriver<G: Fn(f64) -> f64 + Sync> {
    pub c1: f64,
    pub c2: f64,
    pub g: G,
}

impl<G: Fn(f64) -> f64 + Sync> AdvancedDriver for LinearAdvancedDriver<G> {
    fn lipschitz(&self) -> f64 {
        self.c1.abs().max(self.c2.abs())
    }
    fn eval(&self, ctx: &DriverCtx<'_>, out: &mut [f64]) {
        out[0] = self.c1 * ctx.p_now(0) + self.c2 * ctx.p_adv(0) + (self.g)(ctx.t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_grid;

    fn picard(tol: f64) -> SolverSettings {
        SolverSettings { schedule: Schedule::Picard, tol, ..Default::default() }
    }

    #[test]
    fn zero_driver() {
        let grid = make_grid(1.0, 0.01, 3.0).unwrap();
        let d = LinearAdvancedDriver { c1: 0.0, c2: 0.0, g: |_| 0.0 };
        let (sol, rep) = picard_solve(&d, &grid, &picard(1e-20), None, &Init::Zero).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.distances, vec![0.0]);
        assert!(sol.mean_p(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pure_forcing() {
        let grid = make_grid(1.0, 1e-3, 5.0).unwrap();
        let d = LinearAdvancedDriver { c1: 0.0, c2: 0.0, g: |t: f64| (-t).exp() };
        let (sol, _) = picard_solve(&d, &grid, &picard(1e-24), None, &Init::Zero).unwrap();
        for k in (0..=grid.n).step_by(250) {
            let t = grid.t(k);
            let exact = -((-t).exp() - (-5f64).exp());
            assert!((sol.p(0, k, 0) - exact).abs() < 1e-7, "t = {t}");
        }
    }

    #[test]
    fn lambda_star_fixed_point() {
        let l = lambda_star(0.3, 1.0) / 1.1;
        assert!((l - 12.0 * 0.3 * (2.0 + (-l).exp())).abs() < 1e-10);
        assert_eq!(lambda_star(0.0, 1.0), 0.0);
    }

    #[test]
    fn sweep_and_picard_agree() {
        let grid = make_grid(1.0, 0.01, 3.0).unwrap();
        let d = LinearAdvancedDriver { c1: -0.2, c2: 0.3, g: |t: f64| (-t).exp() };
        let (a, ra) = picard_solve(&d, &grid, &picard(1e-26), None, &Init::Zero).unwrap();
        let sweep = SolverSettings { tol: 1e-26, ..Default::default() };
        let (b, rb) = picard_solve(&d, &grid, &sweep, None, &Init::Zero).unwrap();
        assert!(rb.iterations < ra.iterations);
        for k in 0..=grid.n {
            assert!((a.p(0, k, 0) - b.p(0, k, 0)).abs() < 1e-5);
        }
    }

    #[test]
    fn terminal_convention() {
        let grid = make_grid(1.0, 0.1, 3.0).unwrap();
        let d = LinearAdvancedDriver { c1: 0.1, c2: 0.3, g: |_| 1.0 };
        let (sol, _) = picard_solve(&d, &grid, &picard(1e-24), None, &Init::Random { seed: 1, scale: 1.0 }).unwrap();
        for k in grid.n..grid.n + grid.m + 1 {
            assert_eq!(sol.p(0, k, 0), 0.0);
        }
    }

    struct Square;
    impl AdvancedDriver for Square {
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn eval(&self, ctx: &DriverCtx<'_>, out: &mut [f64]) {
            out[0] = ctx.p_now(0) * ctx.p_now(0);
        }
    }

    #[test]
    fn non_lipschitz_driver_fails() {
        let grid = make_grid(1.0, 0.01, 3.0).unwrap();
        let s = SolverSettings { schedule: Schedule::Picard, max_iter: 60, ..Default::default() };
        let r = picard_solve(&Square, &grid, &s, None, &Init::Constant(1.0));
        assert!(matches!(r, Err(Error::NoConvergence { .. }) | Err(Error::BadWeight { .. })));
    }
}

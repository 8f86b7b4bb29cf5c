//! Numerical checks of the sufficient and necessary maximum principles for a
//! candidate control.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix4, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absde::{AdjointTriple, SolverSettings};
use crate::adjoint::{p3_flatness, solve_first_adjoint, solve_second_adjoint};
use crate::error::{Error, Result};
use crate::forward::{
    simulate_ensemble, simulate_lanes, simulate_variational, xi_objective_derivative, ControlSpec, Ensemble,
    NoiseStream, Perturbation,
};
use crate::hamiltonian::{argmax_u, eval_h, grad_h_all, hessian_h, HamArgs, HamArgs1, HamArgs2};
use crate::model::{make_grid, Point, ProblemSpec, TimeGrid};
use crate::objective::estimate_many;
use crate::regression::SliceBasis;
use crate::stats::{compensated_sum, MeanStderr};

/// The information the control may use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfoSet {
    /// Full information: conditioning is the identity.
    Full,
    /// The state observed `lag` time units ago.
    Lagged { lag: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Noise dominates the quantity being tested.
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Pass => 0,
            Self::Fail => 2,
            Self::Inconclusive => 3,
        }
    }

    fn and(self, other: Self) -> Self {
        match (self, other) {
            (Self::Fail, _) | (_, Self::Fail) => Self::Fail,
            (Self::Inconclusive, _) | (_, Self::Inconclusive) => Self::Inconclusive,
            _ => Self::Pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub solver: SolverSettings,
    pub info: InfoSet,
    /// Number of probe times, spread over [0, probe_horizon).
    pub probes: usize,
    /// Defaults to a quarter of the grid horizon, away from the truncation.
    pub probe_horizon: Option<f64>,
    /// Significance multiple for residual tests.
    pub z: f64,
    /// Re-run at 2 dt and at half the horizon and fold the differences into
    /// the uncertainty.
    pub error_budget: bool,
    pub bump_starts: Vec<f64>,
    pub bump_width: f64,
    pub bump_s: Vec<f64>,
    pub hessian_samples: usize,
    pub hessian_tol: f64,
    /// Transversality horizons as fractions of the grid horizon.
    pub ladder: Vec<f64>,
    pub p3_tol: f64,
    /// Points of the control grid for the lagged-information maximisation.
    pub v_grid: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            seed: 0,
            solver: SolverSettings::default(),
            info: InfoSet::Full,
            probes: 20,
            probe_horizon: None,
            z: 3.0,
            error_budget: true,
            bump_starts: Vec::new(),
            bump_width: 0.0,
            bump_s: vec![1e-2, 1e-3],
            hessian_samples: 200,
            hessian_tol: 1e-8,
            ladder: vec![0.125, 0.25, 0.5],
            p3_tol: 1e-6,
            v_grid: 41,
        }
    }
}

impl CheckConfig {
    fn probe_horizon(&self, grid: &TimeGrid) -> f64 {
        self.probe_horizon.unwrap_or(grid.horizon / 4.0).min(grid.horizon)
    }

    /// Probe times, on multiples of 2 dt so that a coarse re-run sees them.
    pub fn probe_times(&self, grid: &TimeGrid) -> Vec<f64> {
        let h = self.probe_horizon(grid);
        let step = 2.0 * grid.dt;
        let mut out: Vec<f64> = (0..self.probes)
            .map(|i| ((h * i as f64 / self.probes as f64) / step).round() * step)
            .collect();
        out.dedup_by(|a, b| (*a - *b).abs() < 0.5 * grid.dt);
        out
    }

    fn bump_windows(&self, grid: &TimeGrid) -> Vec<(f64, f64)> {
        let h = self.probe_horizon(grid);
        let width = if self.bump_width > 0.0 { self.bump_width } else { h / 10.0 };
        let starts = if self.bump_starts.is_empty() {
            (0..4).map(|i| h * i as f64 / 4.0).collect()
        } else {
            self.bump_starts.clone()
        };
        let step = 2.0 * grid.dt;
        let width = (width / step).round().max(1.0) * step;
        starts
            .into_iter()
            .map(|s| ((s / step).round() * step, width))
            .filter(|(s, w)| s + w <= grid.horizon + 1e-9)
            .collect()
    }
}

fn require_paths(ensemble: &Ensemble) -> Result<()> {
    if ensemble.is_empty() {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    Ok(())
}

fn first_args<'a>(adj: &AdjointTriple, point: Point, k: usize, j: usize, r: &'a [f64]) -> HamArgs<'a> {
    HamArgs::First(HamArgs1 { point, p: adj.p(0, k, j), q: adj.q(0, k, j), r })
}

fn second_args<'a>(adj: &AdjointTriple, point: Point, k: usize, j: usize, r: &'a [f64]) -> HamArgs<'a> {
    HamArgs::Second(HamArgs2 {
        point,
        p: [adj.p(0, k, j), adj.p(1, k, j), adj.p(2, k, j)],
        q: [adj.q(0, k, j), adj.q(1, k, j)],
        r,
    })
}

/// The conditioning features of `E_t` on every path at step `k`.
fn info_features(info: InfoSet, ensemble: &Ensemble, k: usize) -> Option<Vec<[f64; 3]>> {
    match info {
        InfoSet::Full => None,
        InfoSet::Lagged { lag } => {
            let steps = (lag / ensemble.grid.dt).round() as usize;
            let kl = k.saturating_sub(steps);
            Some(ensemble.paths.iter().map(|p| [p.x[kl], p.y[kl], p.a[kl]]).collect())
        }
    }
}

/// Re-grid index-based control tables to a grid `factor` times coarser.
fn coarsen(c: &ControlSpec, factor: usize) -> ControlSpec {
    let every = |v: &[f64]| -> Arc<[f64]> { v.iter().step_by(factor).copied().collect::<Vec<_>>().into() };
    match c {
        ControlSpec::OpenLoop(v) => ControlSpec::OpenLoop(every(v)),
        ControlSpec::Scaled { base, factor: f } => ControlSpec::Scaled { base: Box::new(coarsen(base, factor)), factor: *f },
        ControlSpec::Perturbed { base, beta, s } => {
            let beta = match beta {
                Perturbation::Table(v) => Perturbation::Table(every(v)),
                other => other.clone(),
            };
            ControlSpec::Perturbed { base: Box::new(coarsen(base, factor)), beta, s: *s }
        }
        other => other.clone(),
    }
}

// ---------------------------------------------------------------- necessary

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Interior,
    /// Most paths sit at the lower bound: pass iff dH/du <= 0.
    Lower,
    /// Most paths sit at the upper bound: pass iff dH/du >= 0.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeResidual {
    pub t: f64,
    /// Estimate of E[dH/du | E_t] averaged over paths.
    pub mean: f64,
    pub stderr: f64,
    /// |r(dt) - r(2 dt)|.
    pub discretisation: f64,
    /// |r(T) - r(T/2)|.
    pub truncation: f64,
    pub uncertainty: f64,
    /// mean / uncertainty.
    pub z: f64,
    /// RMS of the conditional estimate across paths (lagged information).
    pub conditional_rms: f64,
    pub boundary_fraction: f64,
    pub kind: ProbeKind,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BumpDerivative {
    pub start: f64,
    pub width: f64,
    pub alpha: f64,
    pub s: f64,
    /// (J(u + s beta) - J(u - s beta)) / 2s.
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BumpSummary {
    pub start: f64,
    pub width: f64,
    pub alpha: f64,
    /// Estimate at the smallest s.
    pub estimate: f64,
    pub stderr: f64,
    /// Spread across the s values.
    pub fd_error: f64,
    pub discretisation: f64,
    /// Change when the horizon is halved (windows inside the half horizon only).
    pub truncation: f64,
    pub uncertainty: f64,
    /// The bumped control leaves the control set; the symmetric difference is not used.
    pub clipped: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NecessityReport {
    pub probes: Vec<ProbeResidual>,
    pub bumps: Vec<BumpDerivative>,
    pub bump_summary: Vec<BumpSummary>,
    /// More than half of the probes sit on the boundary of the control set.
    pub boundary_dominated: bool,
    pub max_abs_z: f64,
    pub verdict: Verdict,
}

impl NecessityReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "necessary condition: {:?}", self.verdict);
        let _ = writeln!(s, "  probes: {}  max |z| = {:.3}", self.probes.len(), self.max_abs_z);
        for p in &self.probes {
            let _ = writeln!(
                s,
                "  t = {:>10.4}  dH/du = {:+.6e}  +- {:.3e}  z = {:+.2}  {:?}{}",
                p.t,
                p.mean,
                p.uncertainty,
                p.z,
                p.kind,
                if p.pass { "" } else { "  FAIL" }
            );
        }
        for b in &self.bump_summary {
            let _ = writeln!(
                s,
                "  bump [{:.4}, {:.4}) alpha {:+}: dJ/ds = {:+.6e} +- {:.3e}{}",
                b.start,
                b.start + b.width,
                b.alpha,
                b.estimate,
                b.uncertainty,
                if b.pass { "" } else { "  FAIL" }
            );
        }
        if self.boundary_dominated {
            let _ = writeln!(s, "  note: the control is on the boundary at most probes");
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct ProbeStat {
    mean: f64,
    stderr: f64,
    rms: f64,
    boundary: f64,
    upper: f64,
}

fn residual_stats(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    cfg: &CheckConfig,
    times: &[f64],
) -> Result<Vec<ProbeStat>> {
    let ens = simulate_ensemble(spec, grid, candidate, cfg.n_paths, cfg.seed)?;
    require_paths(&ens)?;
    let (adj, _) = solve_first_adjoint(spec, &ens, &cfg.solver)?;
    let set = spec.control_set;
    times
        .iter()
        .map(|&t| {
            let k = grid.index_of(t);
            let mut vals = Vec::with_capacity(ens.len());
            let mut idx = Vec::with_capacity(ens.len());
            let (mut lo, mut hi) = (0usize, 0usize);
            for (j, rec) in ens.paths.iter().enumerate() {
                if k > rec.last_valid() {
                    continue;
                }
                let r = adj.r_vec(0, k, j);
                let pt = rec.point(k);
                vals.push(grad_h_all(spec, &first_args(&adj, pt, k, j, &r))?.u);
                idx.push(j);
                if set.on_boundary(pt.u, 1e-12) {
                    if pt.u >= set.hi - 1e-12 * (1.0 + set.hi.abs()) {
                        hi += 1;
                    } else {
                        lo += 1;
                    }
                }
            }
            if vals.is_empty() {
                return Err(Error::InvalidParameter(format!("every path left the domain before t = {t}")));
            }
            let s = MeanStderr::from_slice(&vals);
            let rms = match info_features(cfg.info, &ens, k) {
                None => (compensated_sum(vals.iter().map(|v| v * v)) / vals.len() as f64).sqrt(),
                Some(all) => {
                    let feats: Vec<[f64; 3]> = idx.iter().map(|&j| all[j]).collect();
                    let basis = SliceBasis::fit(&feats, cfg.solver.basis_degree)?;
                    let mut fitted = vec![0.0; vals.len()];
                    basis.project(&feats, &vals, &mut fitted);
                    (compensated_sum(fitted.iter().map(|v| v * v)) / vals.len() as f64).sqrt()
                }
            };
            let n = vals.len() as f64;
            Ok(ProbeStat { mean: s.mean, stderr: s.stderr, rms, boundary: (lo + hi) as f64 / n, upper: hi as f64 / n })
        })
        .collect()
}

fn budget_grids(grid: &TimeGrid) -> (Option<TimeGrid>, Option<TimeGrid>) {
    let coarse = make_grid(grid.delta, 2.0 * grid.dt, grid.horizon).ok();
    let half = make_grid(grid.delta, grid.dt, grid.horizon / 2.0).ok();
    (coarse, half)
}

fn z_score(mean: f64, u: f64) -> f64 {
    if mean == 0.0 {
        0.0
    } else if u == 0.0 {
        f64::INFINITY.copysign(mean)
    } else {
        mean / u
    }
}

/// Residuals of the first-order condition at probe times and the bump test.
pub fn necessary_residual(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    cfg: &CheckConfig,
) -> Result<NecessityReport> {
    let times = cfg.probe_times(grid);
    let fine = residual_stats(spec, grid, candidate, cfg, &times)?;
    let (coarse_grid, half_grid) = if cfg.error_budget { budget_grids(grid) } else { (None, None) };
    let coarse = match &coarse_grid {
        Some(g) => Some(residual_stats(spec, g, &coarsen(candidate, 2), cfg, &times)?),
        None => None,
    };
    let half_times: Vec<f64> = times.iter().copied().filter(|t| half_grid.is_some_and(|g| *t <= g.horizon)).collect();
    let half = match &half_grid {
        Some(g) if !half_times.is_empty() => Some(residual_stats(spec, g, candidate, cfg, &half_times)?),
        _ => None,
    };
    let mut probes = Vec::with_capacity(times.len());
    for (i, (&t, f)) in times.iter().zip(&fine).enumerate() {
        let disc = coarse.as_ref().map_or(0.0, |c| (f.mean - c[i].mean).abs());
        let trunc = half.as_ref().and_then(|h| h.get(i)).map_or(0.0, |h| (f.mean - h.mean).abs());
        let unc = (f.stderr.powi(2) + disc.powi(2) + trunc.powi(2)).sqrt();
        let z = z_score(f.mean, unc);
        let kind = if f.boundary > 0.5 {
            if f.upper * 2.0 > f.boundary { ProbeKind::Upper } else { ProbeKind::Lower }
        } else {
            ProbeKind::Interior
        };
        let pass = match kind {
            ProbeKind::Interior => z.abs() <= cfg.z,
            ProbeKind::Upper => z >= -cfg.z,
            ProbeKind::Lower => z <= cfg.z,
        };
        probes.push(ProbeResidual {
            t,
            mean: f.mean,
            stderr: f.stderr,
            discretisation: disc,
            truncation: trunc,
            uncertainty: unc,
            z,
            conditional_rms: f.rms,
            boundary_fraction: f.boundary,
            kind,
            pass,
        });
    }
    let (bumps, bump_summary) = bump_test(spec, grid, candidate, cfg, coarse_grid.as_ref(), half_grid.as_ref())?;
    let boundary_dominated = probes.iter().filter(|p| p.kind != ProbeKind::Interior).count() * 2 > probes.len();
    let max_abs_z = probes.iter().map(|p| p.z.abs()).fold(0.0, f64::max);
    let mut verdict = if probes.iter().all(|p| p.pass) && bump_summary.iter().all(|b| b.pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    if verdict == Verdict::Pass && cfg.n_paths < 2 && probes.iter().any(|p| p.uncertainty == 0.0 && p.mean != 0.0) {
        verdict = Verdict::Inconclusive;
    }
    Ok(NecessityReport { probes, bumps, bump_summary, boundary_dominated, max_abs_z, verdict })
}

fn bump_derivatives(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    cfg: &CheckConfig,
    windows: &[(f64, f64)],
) -> Result<Vec<BumpDerivative>> {
    let mut controls = vec![candidate.clone()];
    let mut meta = Vec::new();
    for &(start, width) in windows {
        for alpha in [1.0, -1.0] {
            for &s in &cfg.bump_s {
                let beta = Perturbation::Window { alpha, start, end: start + width };
                controls.push(candidate.perturbed(beta.clone(), s));
                controls.push(candidate.perturbed(beta, -s));
                meta.push((start, width, alpha, s));
            }
        }
    }
    let batch = estimate_many(spec, grid, &controls, cfg.n_paths, cfg.seed)?;
    Ok(meta
        .iter()
        .enumerate()
        .map(|(i, &(start, width, alpha, s))| {
            let up = &batch.values[1 + 2 * i];
            let dn = &batch.values[2 + 2 * i];
            let d: Vec<f64> = up.iter().zip(dn).map(|(a, b)| (a - b) / (2.0 * s)).collect();
            let st = MeanStderr::from_slice(&d);
            BumpDerivative { start, width, alpha, s, estimate: st.mean, stderr: st.stderr }
        })
        .collect())
}

fn bump_test(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    cfg: &CheckConfig,
    coarse: Option<&TimeGrid>,
    half: Option<&TimeGrid>,
) -> Result<(Vec<BumpDerivative>, Vec<BumpSummary>)> {
    let windows = cfg.bump_windows(grid);
    if windows.is_empty() || cfg.bump_s.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let fine = bump_derivatives(spec, grid, candidate, cfg, &windows)?;
    let coarse_d = match coarse {
        Some(g) => Some(bump_derivatives(spec, g, &coarsen(candidate, 2), cfg, &windows)?),
        None => None,
    };
    let half_windows: Vec<(f64, f64)> =
        windows.iter().copied().filter(|(a, w)| half.is_some_and(|g| a + w <= g.horizon)).collect();
    let half_d = match half {
        Some(g) if !half_windows.is_empty() => Some(bump_derivatives(spec, g, candidate, cfg, &half_windows)?),
        _ => None,
    };
    let s_min = cfg.bump_s.iter().copied().fold(f64::INFINITY, f64::min);
    let mut summary = Vec::new();
    for &(start, width) in &windows {
        for alpha in [1.0, -1.0] {
            let same = |b: &&BumpDerivative| b.start == start && b.alpha == alpha;
            let group: Vec<&BumpDerivative> = fine.iter().filter(same).collect();
            let best = group.iter().find(|b| b.s == s_min).copied().expect("s_min present");
            let fd_error = group.iter().map(|b| (b.estimate - best.estimate).abs()).fold(0.0, f64::max);
            let disc = coarse_d
                .as_ref()
                .and_then(|c| c.iter().find(|b| b.start == start && b.alpha == alpha && b.s == s_min))
                .map_or(0.0, |c| (c.estimate - best.estimate).abs());
            let trunc = half_d
                .as_ref()
                .and_then(|h| h.iter().find(|b| b.start == start && b.alpha == alpha && b.s == s_min))
                .map_or(0.0, |h| (h.estimate - best.estimate).abs());
            let unc = (best.stderr.powi(2) + fd_error.powi(2) + disc.powi(2) + trunc.powi(2)).sqrt();
            let clipped = bump_clipped(spec, candidate, alpha, s_min);
            summary.push(BumpSummary {
                start,
                width,
                alpha,
                estimate: best.estimate,
                stderr: best.stderr,
                fd_error,
                discretisation: disc,
                truncation: trunc,
                uncertainty: unc,
                clipped,
                pass: clipped || z_score(best.estimate, unc).abs() <= cfg.z,
            });
        }
    }
    Ok((fine, summary))
}

fn bump_clipped(spec: &ProblemSpec, candidate: &ControlSpec, alpha: f64, s: f64) -> bool {
    match candidate {
        ControlSpec::Constant(c) => {
            !spec.control_set.contains(c + alpha * s) || !spec.control_set.contains(c - alpha * s)
        }
        _ => false,
    }
}

// ---------------------------------------------------------------- variational

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdPoint {
    pub s: f64,
    /// One-sided (J(u + s beta) - J(u)) / s.
    pub fd_derivative: f64,
    pub fd_stderr: f64,
    /// |fd - xi|.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalReport {
    /// Chain-rule integral along xi.
    pub xi_derivative: f64,
    pub xi_stderr: f64,
    pub fd: Vec<FdPoint>,
    /// log10(error(s_max) / error(s_min)) / log10(s_max / s_min).
    pub order: Option<f64>,
    /// |fd(s_min) - xi| <= 2 stderr of the xi estimate.
    pub agree: bool,
}

/// Compare finite-difference Gateaux derivatives of J along `beta` with the
/// integral along the variational process, on common noise.
pub fn variational_consistency(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    beta: &Perturbation,
    s_values: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<VariationalReport> {
    let mut controls = vec![candidate.clone()];
    controls.extend(s_values.iter().map(|&s| candidate.perturbed(beta.clone(), s)));
    let per_path = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let out = simulate_lanes(spec, grid, &controls, NoiseStream::new(seed, i as u64), true)?;
            let base = out[0].record.as_ref().expect("recorded");
            let v = simulate_variational(spec, grid, base, beta)?;
            let xi = xi_objective_derivative(spec, grid, base, &v);
            let fd: Vec<f64> =
                s_values.iter().enumerate().map(|(c, s)| (out[c + 1].objective - out[0].objective) / s).collect();
            Ok((xi, fd))
        })
        .collect::<Result<Vec<_>>>()?;
    let xi_vals: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let xi = MeanStderr::from_slice(&xi_vals);
    if !xi.mean.is_finite() {
        return Err(Error::NonFinite("variational derivative"));
    }
    let fd: Vec<FdPoint> = s_values
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let v: Vec<f64> = per_path.iter().map(|p| p.1[c]).collect();
            let st = MeanStderr::from_slice(&v);
            FdPoint { s, fd_derivative: st.mean, fd_stderr: st.stderr, error: (st.mean - xi.mean).abs() }
        })
        .collect();
    let order = if fd.len() >= 2 {
        let hi = fd.iter().max_by(|a, b| a.s.total_cmp(&b.s)).expect("non-empty");
        let lo = fd.iter().min_by(|a, b| a.s.total_cmp(&b.s)).expect("non-empty");
        (lo.error > 0.0 && hi.s > lo.s).then(|| (hi.error / lo.error).log10() / (hi.s / lo.s).log10())
    } else {
        None
    };
    let best = fd.iter().min_by(|a, b| a.s.total_cmp(&b.s));
    let agree = best.is_none_or(|b| b.error <= 2.0 * xi.stderr || b.error == 0.0);
    Ok(VariationalReport { xi_derivative: xi.mean, xi_stderr: xi.stderr, fd, order, agree })
}

// ---------------------------------------------------------------- sufficient

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderRung {
    pub horizon: f64,
    /// E[p(T) (X(T) - X^(T))] (or p2 with Y).
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transversality {
    pub control: usize,
    pub which: &'static str,
    pub rungs: Vec<LadderRung>,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Concavity {
    pub samples: usize,
    /// Largest Hessian eigenvalue over the samples.
    pub max_eigenvalue: f64,
    /// Largest d2H/du2 over the samples.
    pub max_u_curvature: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Integrability {
    /// Trapezoid integral over [0, T] of the expected integrand.
    pub integral: f64,
    /// Share of the integral accumulated on the last quarter of the horizon.
    pub tail_share: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapProbe {
    pub t: f64,
    /// E[max_v E[H(v) | E_t] - E[H(u^) | E_t]].
    pub gap: f64,
    pub stderr: f64,
    /// Change of the gap when the adjoint is truncated at half the horizon.
    pub truncation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficiencyReport {
    pub transversality: Vec<Transversality>,
    pub concavity: Concavity,
    pub integrability: Integrability,
    pub gaps: Vec<GapProbe>,
    /// Second system only.
    pub p3_flat: Option<(bool, f64)>,
    pub verdict: Verdict,
}

impl SufficiencyReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sufficient condition: {:?}", self.verdict);
        for t in &self.transversality {
            let rungs: Vec<String> =
                t.rungs.iter().map(|r| format!("T={:.3}: {:+.3e} +- {:.2e}", r.horizon, r.mean, r.stderr)).collect();
            let _ = writeln!(
                s,
                "  transversality ({}, control {}): {}{}",
                t.which,
                t.control,
                rungs.join(", "),
                if t.pass { "" } else { "  FAIL" }
            );
        }
        let c = &self.concavity;
        let _ = writeln!(
            s,
            "  concavity: max eigenvalue {:+.3e} over {} points (u-curvature {:+.3e}){}",
            c.max_eigenvalue,
            c.samples,
            c.max_u_curvature,
            if c.pass { "" } else { "  FAIL" }
        );
        let i = &self.integrability;
        let _ = writeln!(
            s,
            "  integrability: {:.4e}, last-quarter share {:.3}{}",
            i.integral,
            i.tail_share,
            if i.pass { "" } else { "  FAIL" }
        );
        let worst = self.gaps.iter().max_by(|a, b| a.gap.total_cmp(&b.gap));
        if let Some(g) = worst {
            let _ = writeln!(
                s,
                "  largest gap: {:.3e} +- {:.2e} (truncation {:.2e}) at t = {:.4}{}",
                g.gap,
                g.stderr,
                g.truncation,
                g.t,
                if self.gaps.iter().all(|g| g.pass) { "" } else { "  FAIL" }
            );
        }
        if let Some((flat, dev)) = self.p3_flat {
            let _ = writeln!(s, "  p3 flatness: max |p3| = {dev:.3e}{}", if flat { "" } else { "  FAIL" });
        }
        s
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum System {
    First,
    Second,
}

fn args_for<'a>(sys: System, adj: &AdjointTriple, pt: Point, k: usize, j: usize, r: &'a [f64]) -> HamArgs<'a> {
    match sys {
        System::First => first_args(adj, pt, k, j, r),
        System::Second => second_args(adj, pt, k, j, r),
    }
}

fn transversality(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    comparisons: &[ControlSpec],
    adj: &AdjointTriple,
    cfg: &CheckConfig,
    sys: System,
) -> Result<Vec<Transversality>> {
    if comparisons.is_empty() {
        return Ok(Vec::new());
    }
    let mut controls = vec![candidate.clone()];
    controls.extend(comparisons.iter().cloned());
    let ks: Vec<usize> = cfg.ladder.iter().map(|f| grid.index_of(f * grid.horizon)).collect();
    // per path: [control][rung][component]
    let per_path = (0..cfg.n_paths)
        .into_par_iter()
        .map(|j| {
            let out = simulate_lanes(spec, grid, &controls, NoiseStream::new(cfg.seed, j as u64), true)?;
            let base = out[0].record.as_ref().expect("recorded");
            Ok(out[1..]
                .iter()
                .map(|o| {
                    let rec = o.record.as_ref().expect("recorded");
                    ks.iter()
                        .map(|&k| {
                            let dx = rec.x[k] - base.x[k];
                            let dy = rec.y[k] - base.y[k];
                            [adj.p(0, k, j) * dx, if sys == System::Second { adj.p(1, k, j) * dy } else { 0.0 }]
                        })
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let comps: &[(usize, &'static str)] =
        if sys == System::Second { &[(0, "p1 X"), (1, "p2 Y")] } else { &[(0, "p X")] };
    let mut out = Vec::new();
    for c in 0..comparisons.len() {
        for &(comp, which) in comps {
            let rungs: Vec<LadderRung> = ks
                .iter()
                .enumerate()
                .map(|(r, &k)| {
                    let v: Vec<f64> = per_path.iter().map(|p| p[c][r][comp]).collect();
                    let s = MeanStderr::from_slice(&v);
                    LadderRung { horizon: grid.t(k), mean: s.mean, stderr: s.stderr }
                })
                .collect();
            let last = rungs.last().expect("non-empty ladder");
            // the approach to zero is judged on the last step; early rungs may still grow
            let n = rungs.len();
            let decreasing = n < 2 || rungs[n - 1].mean.abs() <= rungs[n - 2].mean.abs() + 2.0 * rungs[n - 1].stderr;
            let pass = last.mean >= -2.0 * last.stderr || decreasing;
            out.push(Transversality { control: c, which, rungs, pass });
        }
    }
    Ok(out)
}

fn concavity(
    spec: &ProblemSpec,
    ens: &Ensemble,
    adj: &AdjointTriple,
    cfg: &CheckConfig,
    sys: System,
    horizon: f64,
) -> Result<Concavity> {
    let grid = &ens.grid;
    let kmax = grid.index_of(horizon).max(1);
    let n = cfg.hessian_samples.max(1);
    let mut max_eig = f64::NEG_INFINITY;
    let mut max_uu = f64::NEG_INFINITY;
    let mut samples = 0;
    for i in 0..n {
        let k = (i * kmax) / n;
        let j = (i * 7919) % ens.len();
        let rec = &ens.paths[j];
        if k > rec.last_valid() {
            continue;
        }
        let r = adj.r_vec(0, k, j);
        let h = hessian_h(spec, &args_for(sys, adj, rec.point(k), k, j, &r))?;
        let m = Matrix4::from_fn(|a, b| h[a][b]);
        let eig = SymmetricEigen::new(m).eigenvalues.max();
        max_eig = max_eig.max(eig);
        max_uu = max_uu.max(h[3][3]);
        samples += 1;
    }
    Ok(Concavity {
        samples,
        max_eigenvalue: max_eig,
        max_u_curvature: max_uu,
        pass: samples > 0 && max_eig <= cfg.hessian_tol,
    })
}

fn integrability(spec: &ProblemSpec, ens: &Ensemble, adj: &AdjointTriple) -> Integrability {
    let grid = &ens.grid;
    let jm = spec.jump.as_ref().filter(|_| spec.has_jumps());
    let vals: Vec<f64> = (0..=grid.n)
        .map(|k| {
            let v: Vec<f64> = ens
                .paths
                .iter()
                .enumerate()
                .map(|(j, rec)| {
                    if k > rec.last_valid() {
                        return 0.0;
                    }
                    let pt = rec.point(k);
                    let p = adj.p(0, k, j);
                    let q = adj.q(0, k, j);
                    let sig = spec.coeffs.diffusion(&pt);
                    let (theta2, r2) = match jm {
                        Some(jm) => (
                            jm.integrate(|z| spec.coeffs.jump(&pt, z).powi(2)),
                            (0..adj.n_atoms).map(|i| jm.atom_rate(i) * adj.r(0, i, k, j).powi(2)).sum(),
                        ),
                        None => (0.0, 0.0),
                    };
                    p * p * (sig * sig + theta2) + pt.x * pt.x * (q * q + r2)
                })
                .collect();
            compensated_sum(v) / ens.len() as f64
        })
        .collect();
    let total = crate::quadrature::trapezoid(&vals, grid.dt);
    let q = (3 * grid.n) / 4;
    let tail = crate::quadrature::trapezoid(&vals[q..], grid.dt);
    let tail_share = if total == 0.0 { 0.0 } else { tail / total };
    Integrability { integral: total, tail_share, pass: total.is_finite() && tail_share < 0.1 }
}

fn bracket(spec: &ProblemSpec, u: f64) -> (f64, f64) {
    let set = spec.control_set;
    let w = 1.0f64.max(10.0 * u.abs());
    let lo = if set.lo.is_finite() { set.lo } else { u - w };
    let hi = if set.hi.is_finite() { set.hi } else { u + w };
    (lo, hi)
}

fn gaps(
    spec: &ProblemSpec,
    ens: &Ensemble,
    adj: &AdjointTriple,
    cfg: &CheckConfig,
    sys: System,
    times: &[f64],
) -> Result<Vec<GapProbe>> {
    let grid = &ens.grid;
    times
        .iter()
        .map(|&t| {
            let k = grid.index_of(t);
            let live: Vec<usize> = (0..ens.len()).filter(|&j| k <= ens.paths[j].last_valid()).collect();
            let h_at = |j: usize, v: f64| -> Result<f64> {
                let r = adj.r_vec(0, k, j);
                let mut pt = ens.paths[j].point(k);
                pt.u = v;
                eval_h(spec, &args_for(sys, adj, pt, k, j, &r))
            };
            let base: Vec<f64> = live.iter().map(|&j| h_at(j, ens.paths[j].u[k])).collect::<Result<_>>()?;
            let gap_vals: Vec<f64> = match info_features(cfg.info, ens, k) {
                None => live
                    .par_iter()
                    .zip(&base)
                    .map(|(&j, &b)| {
                        let u = ens.paths[j].u[k];
                        let (lo, hi) = bracket(spec, u);
                        let h = |v: f64| h_at(j, v).unwrap_or(f64::NEG_INFINITY);
                        let v = argmax_u(h, lo, hi)?;
                        Ok((h(v).max(b) - b).max(0.0))
                    })
                    .collect::<Result<_>>()?,
                Some(all) => {
                    let feats: Vec<[f64; 3]> = live.iter().map(|&j| all[j]).collect();
                    let basis = SliceBasis::fit(&feats, cfg.solver.basis_degree)?;
                    let mut cond_base = vec![0.0; live.len()];
                    basis.project(&feats, &base, &mut cond_base);
                    let mean_u = live.iter().map(|&j| ens.paths[j].u[k]).sum::<f64>() / live.len() as f64;
                    let (lo, hi) = bracket(spec, mean_u);
                    let nv = cfg.v_grid.max(2);
                    let mut best = cond_base.clone();
                    let mut fitted = vec![0.0; live.len()];
                    for i in 0..nv {
                        let v = lo + (hi - lo) * i as f64 / (nv - 1) as f64;
                        let hv: Vec<f64> = live.iter().map(|&j| h_at(j, v)).collect::<Result<_>>()?;
                        basis.project(&feats, &hv, &mut fitted);
                        for (b, f) in best.iter_mut().zip(&fitted) {
                            *b = b.max(*f);
                        }
                    }
                    best.iter().zip(&cond_base).map(|(b, c)| b - c).collect()
                }
            };
            let s = MeanStderr::from_slice(&gap_vals);
            let scale = base.iter().map(|v| v.abs()).sum::<f64>() / base.len().max(1) as f64;
            Ok(GapProbe { t, gap: s.mean, stderr: s.stderr, truncation: 0.0, pass: s.mean <= 2.0 * s.stderr + 1e-6 * (1.0 + scale) })
        })
        .collect()
}

/// Re-evaluate the gaps with the adjoint truncated at half the horizon and
/// fold the change into the test.
fn gap_truncation(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    cfg: &CheckConfig,
    sys: System,
    times: &[f64],
    gaps_full: &mut [GapProbe],
) -> Result<()> {
    let Ok(half) = make_grid(grid.delta, grid.dt, grid.horizon / 2.0) else { return Ok(()) };
    let inside: Vec<f64> = times.iter().copied().filter(|t| *t <= half.horizon).collect();
    if inside.is_empty() {
        return Ok(());
    }
    let ens = simulate_ensemble(spec, &half, candidate, cfg.n_paths, cfg.seed)?;
    let (adj, _) = match sys {
        System::First => solve_first_adjoint(spec, &ens, &cfg.solver)?,
        System::Second => solve_second_adjoint(spec, &ens, &cfg.solver)?,
    };
    let half_gaps = gaps(spec, &ens, &adj, cfg, sys, &inside)?;
    for g in gaps_full.iter_mut() {
        if let Some(h) = half_gaps.iter().find(|h| h.t == g.t) {
            g.truncation = (g.gap - h.gap).abs();
            let unc = (g.stderr.powi(2) + g.truncation.powi(2)).sqrt();
            g.pass = g.pass || g.gap <= 2.0 * unc;
        }
    }
    Ok(())
}

fn check_sufficient(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    comparisons: &[ControlSpec],
    cfg: &CheckConfig,
    sys: System,
) -> Result<SufficiencyReport> {
    let ens = simulate_ensemble(spec, grid, candidate, cfg.n_paths, cfg.seed)?;
    require_paths(&ens)?;
    let (adj, _) = match sys {
        System::First => solve_first_adjoint(spec, &ens, &cfg.solver)?,
        System::Second => solve_second_adjoint(spec, &ens, &cfg.solver)?,
    };
    let times = cfg.probe_times(grid);
    let transversality = transversality(spec, grid, candidate, comparisons, &adj, cfg, sys)?;
    let concavity = concavity(spec, &ens, &adj, cfg, sys, cfg.probe_horizon(grid))?;
    let integrability = integrability(spec, &ens, &adj);
    let mut gaps = gaps(spec, &ens, &adj, cfg, sys, &times)?;
    if cfg.error_budget {
        gap_truncation(spec, grid, candidate, cfg, sys, &times, &mut gaps)?;
    }
    let p3_flat = (sys == System::Second).then(|| {
        let kmax = grid.index_of(cfg.probe_horizon(grid));
        let p3: Vec<f64> = adj.mean_p(2)[..=kmax].to_vec();
        p3_flatness(&p3, cfg.p3_tol)
    });
    let ok = transversality.iter().all(|t| t.pass)
        && concavity.pass
        && integrability.pass
        && gaps.iter().all(|g| g.pass)
        && p3_flat.is_none_or(|f| f.0);
    let mut verdict = if ok { Verdict::Pass } else { Verdict::Fail };
    if cfg.n_paths < 2 && spec.coeffs.diffusion(&ens.paths[0].point(0)) != 0.0 {
        verdict = verdict.and(Verdict::Inconclusive);
    }
    Ok(SufficiencyReport { transversality, concavity, integrability, gaps, p3_flat, verdict })
}

/// Conditions of the first sufficient maximum principle at `candidate`.
pub fn check_sufficient_first(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    comparisons: &[ControlSpec],
    cfg: &CheckConfig,
) -> Result<SufficiencyReport> {
    check_sufficient(spec, grid, candidate, comparisons, cfg, System::First)
}

/// Conditions of the second sufficient maximum principle, including the p2
/// transversality ladder and the flatness of p3.
pub fn check_sufficient_second(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    candidate: &ControlSpec,
    comparisons: &[ControlSpec],
    cfg: &CheckConfig,
) -> Result<SufficiencyReport> {
    check_sufficient(spec, grid, candidate, comparisons, cfg, System::Second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_quadratic, ControlSet, InitialSegment, LqParams, ZeroCoeffs};

    fn zero_spec() -> ProblemSpec {
        ProblemSpec::new(1.0, 1.0, Arc::new(ZeroCoeffs), ControlSet::new(-1.0, 1.0).unwrap(), InitialSegment::Constant(1.0))
            .unwrap()
    }

    fn small_cfg() -> CheckConfig {
        CheckConfig { n_paths: 4, hessian_samples: 10, ..Default::default() }
    }

    #[test]
    fn zero_problem_passes_everything() {
        let spec = zero_spec();
        let grid = make_grid(1.0, 0.1, 8.0).unwrap();
        let u = ControlSpec::Constant(0.3);
        let rep = check_sufficient_first(&spec, &grid, &u, &[ControlSpec::Constant(-0.5)], &small_cfg()).unwrap();
        assert!(rep.gaps.iter().all(|g| g.gap == 0.0));
        assert_eq!(rep.verdict, Verdict::Pass);
        let rep = check_sufficient_second(&spec, &grid, &u, &[], &small_cfg()).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        let nec = necessary_residual(&spec, &grid, &u, &small_cfg()).unwrap();
        assert!(nec.probes.iter().all(|p| p.mean == 0.0));
        assert_eq!(nec.verdict, Verdict::Pass);
    }

    #[test]
    fn zero_perturbation_gives_zero_derivatives() {
        let spec = ProblemSpec::new(
            0.5,
            1.0,
            Arc::new(linear_quadratic(&LqParams { bx: 0.1, bu: 1.0, s0: 0.2, qx: 1.0, ru: 1.0, ..Default::default() })),
            ControlSet::unbounded(),
            InitialSegment::Constant(1.0),
        )
        .unwrap();
        let grid = make_grid(0.5, 0.01, 2.0).unwrap();
        let r = variational_consistency(&spec, &grid, &ControlSpec::Constant(0.1), &Perturbation::Zero, &[1e-2], 8, 1)
            .unwrap();
        assert_eq!(r.xi_derivative, 0.0);
        assert_eq!(r.fd[0].fd_derivative, 0.0);
    }

    #[test]
    fn linear_response_matches_closed_form() {
        // dX = (0.1 X + u) dt + 0.2 dB, f = X: dJ/ds along beta = 1 on [0, 1)
        // equals int_0^T int_0^{min(t,1)} e^{0.1 (t - r)} dr dt.
        let spec = ProblemSpec::new(
            0.5,
            1.0,
            Arc::new(linear_quadratic(&LqParams { bx: 0.1, bu: 1.0, s0: 0.2, lx: 1.0, ..Default::default() })),
            ControlSet::unbounded(),
            InitialSegment::Constant(1.0),
        )
        .unwrap();
        let grid = make_grid(0.5, 1e-3, 2.0).unwrap();
        let beta = Perturbation::Window { alpha: 1.0, start: 0.0, end: 1.0 };
        let r = variational_consistency(&spec, &grid, &ControlSpec::Constant(0.0), &beta, &[1e-2, 1e-3], 16, 3).unwrap();
        let xi = |t: f64| if t <= 1.0 { ((0.1 * t).exp() - 1.0) / 0.1 } else { ((0.1 * t).exp() - (0.1 * (t - 1.0)).exp()) / 0.1 };
        let exact = crate::quadrature::integrate_composite(xi, 0.0, 2.0, 16);
        assert!((r.xi_derivative - exact).abs() < 2e-3, "{} vs {exact}", r.xi_derivative);
        for p in &r.fd {
            assert!((p.fd_derivative - r.xi_derivative).abs() < 1e-9);
        }
    }

    #[test]
    fn verdict_codes() {
        assert_eq!(Verdict::Pass.exit_code(), 0);
        assert_eq!(Verdict::Fail.exit_code(), 2);
        assert_eq!(Verdict::Inconclusive.exit_code(), 3);
        assert_eq!(Verdict::Pass.and(Verdict::Inconclusive), Verdict::Inconclusive);
    }

    #[test]
    fn probe_times_on_coarse_grid() {
        let grid = make_grid(0.5, 0.01, 10.0).unwrap();
        let cfg = CheckConfig::default();
        let t = cfg.probe_times(&grid);
        assert_eq!(t.len(), 20);
        for v in t {
            assert!(((v / 0.02).round() * 0.02 - v).abs() < 1e-12);
            assert!(v < 2.5);
        }
    }
}

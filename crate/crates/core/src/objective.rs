//! Monte Carlo estimation of the performance functional.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{simulate_lanes, ControlSpec, NoiseStream};
use crate::model::{ProblemSpec, TimeGrid};
use crate::stats::{compensated_sum, MeanStderr};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub truncation_t: f64,
    /// Heuristic size of the neglected tail, `E|f(T)| / discount`. Reported only.
    pub tail_bound: f64,
    pub exited_paths: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// Per-path objectives of several controls on shared noise.
#[derive(Debug, Clone)]
pub struct ObjectiveBatch {
    /// `values[c][i]` is the objective of control `c` on path `i`.
    pub values: Vec<Vec<f64>>,
    pub estimates: Vec<ObjectiveEstimate>,
}

impl ObjectiveBatch {
    /// Paired difference `J_a - J_b` path by path.
    pub fn paired(&self, a: usize, b: usize) -> PairedEstimate {
        let d: Vec<f64> = self.values[a].iter().zip(&self.values[b]).map(|(x, y)| x - y).collect();
        let s = MeanStderr::from_slice(&d);
        PairedEstimate { mean: s.mean, stderr: s.stderr, n_paths: s.n }
    }
}

/// Simulate every control on paths `0..n_paths` of `seed`.
pub fn estimate_many(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    controls: &[ControlSpec],
    n_paths: usize,
    seed: u64,
) -> Result<ObjectiveBatch> {
    let per_path = (0..n_paths)
        .into_par_iter()
        .map(|i| simulate_lanes(spec, grid, controls, NoiseStream::new(seed, i as u64), false))
        .collect::<Result<Vec<_>>>()?;
    let nc = controls.len();
    let mut values = vec![Vec::with_capacity(n_paths); nc];
    let mut f_last = vec![Vec::with_capacity(n_paths); nc];
    let mut exited = vec![0usize; nc];
    for outcomes in &per_path {
        for (c, o) in outcomes.iter().enumerate() {
            values[c].push(o.objective);
            f_last[c].push(o.f_last.abs());
            exited[c] += o.exit_step.is_some() as usize;
        }
    }
    let estimates = (0..nc)
        .map(|c| {
            if values[c].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteObjective);
            }
            let s = MeanStderr::from_slice(&values[c]);
            let tail = if n_paths == 0 {
                0.0
            } else {
                compensated_sum(f_last[c].iter().copied()) / n_paths as f64 / spec.discount
            };
            Ok(ObjectiveEstimate {
                mean: s.mean,
                stderr: s.stderr,
                n_paths,
                truncation_t: grid.horizon,
                tail_bound: tail,
                exited_paths: exited[c],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectiveBatch { values, estimates })
}

pub fn estimate_j(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    control: &ControlSpec,
    n_paths: usize,
    seed: u64,
) -> Result<ObjectiveEstimate> {
    Ok(estimate_many(spec, grid, std::slice::from_ref(control), n_paths, seed)?.estimates[0])
}

/// Paired CRN estimate of `J(u_a) - J(u_b)`.
pub fn compare_controls(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    u_a: &ControlSpec,
    u_b: &ControlSpec,
    n_paths: usize,
    seed: u64,
) -> Result<PairedEstimate> {
    let batch = estimate_many(spec, grid, &[u_a.clone(), u_b.clone()], n_paths, seed)?;
    Ok(batch.paired(0, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_grid, ControlSet, InitialSegment, Monomial, Polynomial, PolynomialCoeffs, ZeroCoeffs};
    use std::sync::Arc;

    #[test]
    fn zero_reward() {
        let spec = ProblemSpec::new(1.0, 0.1, Arc::new(ZeroCoeffs), ControlSet::unbounded(), InitialSegment::Constant(1.0)).unwrap();
        let grid = make_grid(1.0, 0.1, 5.0).unwrap();
        let e = estimate_j(&spec, &grid, &ControlSpec::Constant(0.0), 20, 1).unwrap();
        assert_eq!((e.mean, e.stderr), (0.0, 0.0));
    }

    #[test]
    fn discounted_constant_reward() {
        let c = PolynomialCoeffs {
            reward: Polynomial::new(vec![Monomial::new(1.0, 0, 0, 0, 0)]),
            reward_discount: 0.1,
            ..Default::default()
        };
        let spec = ProblemSpec::new(1.0, 0.1, Arc::new(c), ControlSet::unbounded(), InitialSegment::Constant(1.0)).unwrap();
        let grid = make_grid(1.0, 0.01, 50.0).unwrap();
        let e = estimate_j(&spec, &grid, &ControlSpec::Constant(0.0), 3, 1).unwrap();
        assert!((e.mean - (1.0 - (-5f64).exp()) / 0.1).abs() < 1e-3);
        assert_eq!(e.stderr, 0.0);
        assert!((e.tail_bound - (-5f64).exp() / 0.1).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let c = PolynomialCoeffs {
            drift: Polynomial::new(vec![Monomial::new(0.1, 1, 0, 0, 0), Monomial::new(1.0, 0, 0, 0, 1)]),
            diffusion: Polynomial::new(vec![Monomial::new(0.3, 1, 0, 0, 0)]),
            reward: Polynomial::new(vec![Monomial::new(-1.0, 2, 0, 0, 0)]),
            reward_discount: 0.5,
            ..Default::default()
        };
        let spec = ProblemSpec::new(0.5, 0.5, Arc::new(c), ControlSet::unbounded(), InitialSegment::Constant(1.0)).unwrap();
        let grid = make_grid(0.5, 0.05, 2.0).unwrap();
        let u = ControlSpec::Constant(0.3);
        let d = compare_controls(&spec, &grid, &u, &u, 50, 4).unwrap();
        assert_eq!((d.mean, d.stderr), (0.0, 0.0));
    }
}

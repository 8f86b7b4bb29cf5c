//! Finite-activity compound Poisson jump measure.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gl64;

/// Mark distribution of the compound Poisson process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkDistribution {
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

/// One quadrature node of the mark distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkNode {
    pub z: f64,
    /// Probability weight; weights sum to one.
    pub w: f64,
    /// Index of the atom (bin) the node belongs to.
    pub atom: usize,
}

/// A cell of the mark partition on which r(t, z) is held constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarkAtom {
    /// Representative mark (the conditional mean of the cell).
    pub z: f64,
    pub mass: f64,
    pub lo: f64,
    pub hi: f64,
}

const CONTINUOUS_BINS: usize = 8;
// Octiles of the standard normal.
const NORMAL_OCTILES: [f64; 7] = [
    -1.150_349_380_376_008,
    -0.674_489_750_196_081_7,
    -0.318_639_363_964_375_2,
    0.0,
    0.318_639_363_964_375_2,
    0.674_489_750_196_081_7,
    1.150_349_380_376_008,
];

#[derive(Debug, Clone, PartialEq)]
pub struct JumpModel {
    pub intensity: f64,
    pub marks: MarkDistribution,
    nodes: Vec<MarkNode>,
    atoms: Vec<MarkAtom>,
    cumulative: Vec<f64>,
}

impl JumpModel {
    pub fn new(intensity: f64, marks: MarkDistribution) -> Result<Self> {
        if !(intensity.is_finite() && intensity >= 0.0) {
            return Err(Error::InvalidParameter(format!("jump intensity {intensity}")));
        }
        let (nodes, atoms) = match &marks {
            MarkDistribution::Discrete { values, probs } => discrete_nodes(values, probs)?,
            MarkDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidParameter(format!("uniform marks on [{lo}, {hi}]")));
                }
                let edges: Vec<f64> = (0..=CONTINUOUS_BINS)
                    .map(|i| lo + (hi - lo) * i as f64 / CONTINUOUS_BINS as f64)
                    .collect();
                let dens = 1.0 / (hi - lo);
                continuous_nodes(&edges, |_| dens)
            }
            MarkDistribution::Normal { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && *std > 0.0) {
                    return Err(Error::InvalidParameter(format!("normal marks N({mean}, {std}^2)")));
                }
                let mut edges = vec![mean - 8.0 * std];
                edges.extend(NORMAL_OCTILES.iter().map(|q| mean + std * q));
                edges.push(mean + 8.0 * std);
                let norm = 1.0 / (std * (2.0 * std::f64::consts::PI).sqrt());
                continuous_nodes(&edges, |z| {
                    let s = (z - mean) / std;
                    norm * (-0.5 * s * s).exp()
                })
            }
        };
        let mut acc = 0.0;
        let cumulative = match &marks {
            MarkDistribution::Discrete { probs, .. } => probs
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self { intensity, marks, nodes, atoms, cumulative })
    }

    pub fn nodes(&self) -> &[MarkNode] {
        &self.nodes
    }

    pub fn atoms(&self) -> &[MarkAtom] {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Intensity of the atom: nu(cell i).
    pub fn atom_rate(&self, i: usize) -> f64 {
        self.intensity * self.atoms[i].mass
    }

    /// Index of the cell containing mark `z`.
    pub fn atom_of(&self, z: f64) -> usize {
        match &self.marks {
            MarkDistribution::Discrete { values, .. } => values
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - z).abs().total_cmp(&(b.1 - z).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0),
            _ => {
                let n = self.atoms.len();
                (0..n).find(|&i| z < self.atoms[i].hi).unwrap_or(n - 1)
            }
        }
    }

    /// Mark expectation E[g(Z)]; exact for discrete marks.
    pub fn expect<G: FnMut(f64) -> f64>(&self, mut g: G) -> f64 {
        self.nodes.iter().map(|n| n.w * g(n.z)).sum()
    }

    /// `int g(z) nu(dz) = intensity * E[g(Z)]`.
    pub fn integrate<G: FnMut(f64) -> f64>(&self, g: G) -> f64 {
        if self.intensity == 0.0 {
            return 0.0;
        }
        self.intensity * self.expect(g)
    }

    /// `int g(z) r(z) nu(dz)` for r held constant on each atom.
    pub fn integrate_with_r<G: FnMut(f64) -> f64>(&self, mut g: G, r: &[f64]) -> f64 {
        if self.intensity == 0.0 {
            return 0.0;
        }
        self.intensity * self.nodes.iter().map(|n| n.w * g(n.z) * r[n.atom]).sum::<f64>()
    }

    /// Per-atom weights `W_i = int_{cell i} g(z) nu(dz)`.
    pub fn atom_weights<G: FnMut(f64) -> f64>(&self, mut g: G, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for n in &self.nodes {
            out[n.atom] += self.intensity * n.w * g(n.z);
        }
    }

    /// First and second moments of the mark, E[Z] and E[Z^2].
    pub fn mark_moments(&self) -> (f64, f64) {
        match &self.marks {
            MarkDistribution::Discrete { values, probs } => (
                values.iter().zip(probs).map(|(v, p)| v * p).sum(),
                values.iter().zip(probs).map(|(v, p)| v * v * p).sum(),
            ),
            MarkDistribution::Uniform { lo, hi } => {
                (0.5 * (lo + hi), (hi * hi + hi * lo + lo * lo) / 3.0)
            }
            MarkDistribution::Normal { mean, std } => (*mean, mean * mean + std * std),
        }
    }

    /// Number of jumps in a step of length `dt`, by inversion of one uniform.
    pub fn sample_count(&self, dt: f64, uniform: f64) -> usize {
        let lam = self.intensity * dt;
        if lam == 0.0 {
            return 0;
        }
        let mut p = (-lam).exp();
        let mut cdf = p;
        let mut k = 0;
        while uniform > cdf && k < 256 {
            k += 1;
            p *= lam / k as f64;
            cdf += p;
        }
        k
    }

    pub fn sample_mark<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.marks {
            MarkDistribution::Discrete { values, .. } => {
                let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
                let i = self.cumulative.iter().position(|c| u < *c).unwrap_or(values.len() - 1);
                values[i]
            }
            MarkDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            MarkDistribution::Normal { mean, std } => {
                let s: f64 = rng.sample(StandardNormal);
                mean + std * s
            }
        }
    }
}

fn discrete_nodes(values: &[f64], probs: &[f64]) -> Result<(Vec<MarkNode>, Vec<MarkAtom>)> {
    if values.is_empty() || values.len() != probs.len() {
        return Err(Error::InvalidParameter("discrete marks need matching non-empty values and probs".into()));
    }
    if values.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter("marks must be finite and non-zero".into()));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidParameter("mark probabilities must be non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("mark probabilities sum to {total}")));
    }
    let nodes = values
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(i, (&z, &w))| MarkNode { z, w, atom: i })
        .collect();
    let atoms = values
        .iter()
        .zip(probs)
        .map(|(&z, &mass)| MarkAtom { z, mass, lo: z, hi: z })
        .collect();
    Ok((nodes, atoms))
}

// Gauss–Legendre on every bin; weights renormalised to total mass one.
fn continuous_nodes<D: Fn(f64) -> f64>(edges: &[f64], density: D) -> (Vec<MarkNode>, Vec<MarkAtom>) {
    let (gx, gw) = gl64();
    let mut nodes = Vec::new();
    let mut atoms = Vec::new();
    for (i, win) in edges.windows(2).enumerate() {
        let (lo, hi) = (win[0], win[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut mass = 0.0;
        let mut first = 0.0;
        for (x, w) in gx.iter().zip(gw) {
            let z = mid + half * x;
            let wz = w * half * density(z);
            mass += wz;
            first += wz * z;
            nodes.push(MarkNode { z, w: wz, atom: i });
        }
        atoms.push(MarkAtom { z: first / mass, mass, lo, hi });
    }
    let total: f64 = atoms.iter().map(|a| a.mass).sum();
    for n in &mut nodes {
        n.w /= total;
    }
    for a in &mut atoms {
        a.mass /= total;
    }
    (nodes, atoms)
}

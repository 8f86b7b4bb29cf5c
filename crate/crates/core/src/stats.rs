//! Order-stable reductions for Monte Carlo estimates.

use serde::{Deserialize, Serialize};

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Sample mean with the standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn from_slice(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, stderr: 0.0, n };
        }
        let mean = compensated_sum(values.iter().copied()) / n as f64;
        if n == 1 {
            return Self { mean, stderr: 0.0, n };
        }
        let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
        let var = ss / (n - 1) as f64;
        Self { mean, stderr: (var / n as f64).sqrt(), n }
    }

    /// True when |mean| is within `k` standard errors of zero.
    pub fn within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.stderr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_beats_naive() {
        let mut vals = vec![1.0];
        vals.extend(std::iter::repeat_n(1e-16, 1000));
        assert!((compensated_sum(vals.iter().copied()) - (1.0 + 1e-13)).abs() < 1e-17);
    }

    #[test]
    fn constant_sample_has_zero_stderr() {
        let m = MeanStderr::from_slice(&[2.5; 10]);
        assert_eq!(m.mean, 2.5);
        assert_eq!(m.stderr, 0.0);
    }

    #[test]
    fn stderr_of_two_points() {
        let m = MeanStderr::from_slice(&[0.0, 2.0]);
        assert_eq!(m.mean, 1.0);
        assert!((m.stderr - 1.0).abs() < 1e-15);
    }
}

//! Least-squares conditional expectations on a polynomial basis in (X, Y, A).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Polynomial basis fitted on one time slice of an ensemble.
///
/// Features are standardised; features that are constant across paths are
/// dropped. The normal-equation Cholesky factor is computed once.
#[derive(Debug, Clone)]
pub struct SliceBasis {
    mean: [f64; 3],
    scale: [f64; 3],
    exps: Vec<[u8; 3]>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn monomials(keep: &[usize], degree: usize) -> Vec<[u8; 3]> {
    let mut out = vec![[0u8; 3]];
    let mut frontier = vec![[0u8; 3]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            for &v in keep {
                let mut f = *e;
                f[v] += 1;
                if !out.contains(&f) && !next.contains(&f) {
                    next.push(f);
                }
            }
        }
        out.extend(next.iter().copied());
        frontier = next;
    }
    out
}

impl SliceBasis {
    pub fn fit(features: &[[f64; 3]], degree: usize) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::InvalidParameter("regression on an empty ensemble".into()));
        }
        let mut mean = [0.0; 3];
        let mut scale = [1.0; 3];
        let mut keep = Vec::new();
        for v in 0..3 {
            let m = features.iter().map(|f| f[v]).sum::<f64>() / n as f64;
            let var = features.iter().map(|f| (f[v] - m).powi(2)).sum::<f64>() / n as f64;
            mean[v] = m;
            let sd = var.sqrt();
            if sd > 1e-10 * (1.0 + m.abs()) {
                scale[v] = sd;
                keep.push(v);
            }
        }
        let exps = monomials(&keep, degree);
        let cols = exps.len();
        let mut basis = Self { mean, scale, exps, chol: DMatrix::<f64>::identity(1, 1).cholesky().expect("identity") };
        let mut gram = DMatrix::<f64>::zeros(cols, cols);
        let mut row = vec![0.0; cols];
        for f in features {
            basis.row(f, &mut row);
            for i in 0..cols {
                for j in 0..=i {
                    gram[(i, j)] += row[i] * row[j];
                }
            }
        }
        for i in 0..cols {
            for j in 0..i {
                gram[(j, i)] = gram[(i, j)];
            }
        }
        gram /= n as f64;
        let mut ridge = 1e-12;
        loop {
            let mut g = gram.clone();
            for i in 1..cols {
                g[(i, i)] += ridge;
            }
            if let Some(c) = g.cholesky() {
                basis.chol = c;
                return Ok(basis);
            }
            ridge *= 100.0;
            if ridge > 1.0 {
                return Err(Error::NonFinite("regression normal equations"));
            }
        }
    }

    pub fn n_basis(&self) -> usize {
        self.exps.len()
    }

    fn row(&self, f: &[f64; 3], out: &mut [f64]) {
        let z = [
            (f[0] - self.mean[0]) / self.scale[0],
            (f[1] - self.mean[1]) / self.scale[1],
            (f[2] - self.mean[2]) / self.scale[2],
        ];
        for (o, e) in out.iter_mut().zip(&self.exps) {
            *o = z[0].powi(e[0] as i32) * z[1].powi(e[1] as i32) * z[2].powi(e[2] as i32);
        }
    }

    /// Regression coefficients of `y` on the basis.
    pub fn coefficients(&self, features: &[[f64; 3]], y: &[f64]) -> Vec<f64> {
        let cols = self.n_basis();
        let mut rhs = DVector::<f64>::zeros(cols);
        let mut row = vec![0.0; cols];
        for (f, v) in features.iter().zip(y) {
            self.row(f, &mut row);
            for i in 0..cols {
                rhs[i] += row[i] * v;
            }
        }
        rhs /= features.len() as f64;
        self.chol.solve(&rhs).iter().copied().collect()
    }

    /// Fitted values of `y`, written to `out`.
    pub fn project(&self, features: &[[f64; 3]], y: &[f64], out: &mut [f64]) {
        let c = self.coefficients(features, y);
        self.evaluate(&c, features, out);
    }

    pub fn evaluate(&self, coef: &[f64], features: &[[f64; 3]], out: &mut [f64]) {
        let mut row = vec![0.0; self.n_basis()];
        for (o, f) in out.iter_mut().zip(features) {
            self.row(f, &mut row);
            *o = row.iter().zip(coef).map(|(a, b)| a * b).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_size() {
        assert_eq!(monomials(&[0, 1, 2], 2).len(), 10);
        assert_eq!(monomials(&[0], 3).len(), 4);
        assert_eq!(monomials(&[], 3).len(), 1);
    }

    #[test]
    fn reproduces_polynomials() {
        let feats: Vec<[f64; 3]> = (0..200)
            .map(|i| {
                let x = (i as f64 * 0.37).sin() + 2.0;
                [x, (i as f64 * 0.11).cos(), 0.5]
            })
            .collect();
        let y: Vec<f64> = feats.iter().map(|f| 1.0 + 2.0 * f[0] - f[0] * f[1]).collect();
        let b = SliceBasis::fit(&feats, 2).unwrap();
        assert_eq!(b.n_basis(), 6);
        let mut out = vec![0.0; y.len()];
        b.project(&feats, &y, &mut out);
        for (a, e) in out.iter().zip(&y) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_features_give_the_mean() {
        let feats = vec![[1.0, 1.0, 1.0]; 5];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = SliceBasis::fit(&feats, 3).unwrap();
        let mut out = vec![0.0; 5];
        b.project(&feats, &y, &mut out);
        assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-14));
    }
}

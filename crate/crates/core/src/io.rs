//! CSV and JSON writers. Numbers are written with 17 significant digits so
//! that reruns are byte-comparable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::absde::AdjointTriple;
use crate::error::Result;
use crate::forward::Ensemble;

/// Fixed-width scientific formatting, 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn row<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            w.write_all(b",")?;
        }
        first = false;
        w.write_all(num(*v).as_bytes())?;
    }
    w.write_all(b"\n")
}

/// Long-format paths: `path_id,t,X,Y,A,u`.
pub fn write_paths_csv<W: Write>(w: &mut W, ensemble: &Ensemble) -> Result<()> {
    writeln!(w, "path_id,t,X,Y,A,u")?;
    for (id, p) in ensemble.paths.iter().enumerate() {
        for k in 0..p.t.len() {
            write!(w, "{id},")?;
            row(w, &[p.t[k], p.x[k], p.y[k], p.a[k], p.u[k]])?;
        }
    }
    Ok(())
}

/// Path-averaged adjoint: `t,p,q,r_0,...` for one component or
/// `t,p1,p2,p3,q1,q2,r_0,...` for the three-component system.
pub fn write_adjoint_csv<W: Write>(w: &mut W, adj: &AdjointTriple) -> Result<()> {
    let r_cols: Vec<String> = (0..adj.n_atoms).map(|i| format!("r_{i}")).collect();
    let (p_cols, q_cols): (Vec<String>, Vec<String>) = if adj.dim == 1 {
        (vec!["p".into()], vec!["q".into()])
    } else {
        ((1..=adj.dim).map(|c| format!("p{c}")).collect(), (1..adj.dim).map(|c| format!("q{c}")).collect())
    };
    let mut header = vec!["t".to_string()];
    header.extend(p_cols.iter().cloned());
    header.extend(q_cols.iter().cloned());
    header.extend(r_cols);
    writeln!(w, "{}", header.join(","))?;
    let p: Vec<Vec<f64>> = (0..adj.dim).map(|c| adj.mean_p(c)).collect();
    let q: Vec<Vec<f64>> = (0..q_cols.len()).map(|c| adj.mean_q(c)).collect();
    let r: Vec<Vec<f64>> = (0..adj.n_atoms).map(|i| adj.mean_r(0, i)).collect();
    let mut vals = Vec::with_capacity(1 + p.len() + q.len() + r.len());
    for k in 0..=adj.grid.n {
        vals.clear();
        vals.push(adj.grid.t(k));
        vals.extend(p.iter().map(|c| c[k]));
        vals.extend(q.iter().map(|c| c[k]));
        vals.extend(r.iter().map(|c| c[k]));
        row(w, &vals)?;
    }
    Ok(())
}

/// Per-path objectives: `path_id,J`.
pub fn write_objectives_csv<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    writeln!(w, "path_id,J")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i},{}", num(*v))?;
    }
    Ok(())
}

pub fn write_json<W: Write, T: Serialize + ?Sized>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Create `path` and hand a buffered writer to `f`.
pub fn with_file<F: FnOnce(&mut BufWriter<File>) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absde::{picard_solve, Init, LinearAdvancedDriver, SolverSettings};
    use crate::model::make_grid;

    #[test]
    fn seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
    }

    #[test]
    fn adjoint_header() {
        let grid = make_grid(1.0, 0.5, 2.0).unwrap();
        let d = LinearAdvancedDriver { c1: 0.0, c2: 0.0, g: |_| 1.0 };
        let (a, _) = picard_solve(&d, &grid, &SolverSettings::default(), None, &Init::Zero).unwrap();
        let mut buf = Vec::new();
        write_adjoint_csv(&mut buf, &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,p,q");
        assert_eq!(lines.len(), grid.n + 2);
        assert!(lines[lines.len() - 1].starts_with("2.0000000000000000e0,0.0000000000000000e0"));
    }
}

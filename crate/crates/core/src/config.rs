//! JSON configuration format.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::absde::{Mode, Schedule};
use crate::error::{Error, Result};
use crate::examples::{self, Example34Params, Example35Params};
use crate::forward::ControlSpec;
use crate::model::{
    linear_quadratic, make_grid, Coefficients, ControlSet, InitialSegment, JumpModel, LqParams,
    MarkDistribution, Polynomial, PolynomialCoeffs, ProblemSpec, TimeGrid, Warnings,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub problem: RawProblem,
    #[serde(default)]
    pub jump: Option<RawJump>,
    pub grid: RawGrid,
    #[serde(default)]
    pub mc: RawMc,
    #[serde(default)]
    pub solver: RawSolver,
    #[serde(default)]
    pub control: Option<RawControl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProblem {
    pub delta: f64,
    pub rho: f64,
    #[serde(default)]
    pub lambda_avg: Option<f64>,
    #[serde(default)]
    pub discount: Option<f64>,
    pub coefficients: CoefficientSelector,
    pub control_bounds: RawBounds,
    pub initial_segment: RawSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBounds {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawSegment {
    Constant { value: f64 },
    Linear { at_zero: f64, slope: f64 },
    Samples { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "selector", deny_unknown_fields)]
pub enum CoefficientSelector {
    #[serde(rename = "example_3_4")]
    Example34 {
        gamma: f64,
        mu: f64,
        #[serde(default)]
        sigma: f64,
    },
    #[serde(rename = "example_3_5")]
    Example35 {
        gamma: f64,
        mu: f64,
        #[serde(default)]
        alpha: Option<f64>,
        beta: f64,
        #[serde(default)]
        sigma: f64,
    },
    #[serde(rename = "linear_quadratic")]
    LinearQuadratic(LqParams),
    #[serde(rename = "custom_polynomial")]
    CustomPolynomial {
        #[serde(default)]
        drift: Polynomial,
        #[serde(default)]
        diffusion: Polynomial,
        #[serde(default)]
        jump: Polynomial,
        #[serde(default)]
        reward: Polynomial,
        #[serde(default)]
        reward_discount: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawJump {
    pub intensity: f64,
    pub marks: MarkDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    pub dt: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawMc {
    pub paths: usize,
    pub seed: u64,
}

impl Default for RawMc {
    fn default() -> Self {
        Self { paths: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawSolver {
    pub picard_max_iter: usize,
    pub picard_tol: f64,
    pub weight_lambda: Option<f64>,
    pub basis_degree: usize,
    pub mode: Mode,
    pub schedule: Schedule,
    /// Adjoint truncation horizon when longer than the grid horizon.
    pub adjoint_horizon: Option<f64>,
}

impl Default for RawSolver {
    fn default() -> Self {
        Self {
            picard_max_iter: 100,
            picard_tol: 1e-20,
            weight_lambda: None,
            basis_degree: 2,
            mode: Mode::Deterministic,
            schedule: Schedule::Sweep,
            adjoint_horizon: None,
        }
    }
}

/// Candidate control for checks and objective runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawControl {
    /// The example's closed-form feedback (p0 defaults to the optimal value).
    ClosedForm {
        #[serde(default)]
        p0: Option<f64>,
        #[serde(default)]
        scale: Option<f64>,
    },
    /// The example's closed-form optimum realised as an open-loop table.
    ClosedFormOpenLoop,
    Constant { value: f64 },
    /// CSV with columns `t,u` (or a single `u` column) on the grid.
    File { path: String },
}

impl RawConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn lambda_avg(&self) -> f64 {
        self.problem.lambda_avg.unwrap_or(self.problem.rho)
    }

    pub fn discount(&self) -> f64 {
        self.problem.discount.unwrap_or(self.problem.rho)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        make_grid(self.problem.delta, self.grid.dt, self.grid.horizon)
    }

    fn segment(&self) -> InitialSegment {
        match &self.problem.initial_segment {
            RawSegment::Constant { value } => InitialSegment::Constant(*value),
            RawSegment::Linear { at_zero, slope } => InitialSegment::Linear { at_zero: *at_zero, slope: *slope },
            RawSegment::Samples { values } => InitialSegment::Samples(values.clone()),
        }
    }

    pub fn ex34_params(&self) -> Option<Example34Params> {
        match &self.problem.coefficients {
            CoefficientSelector::Example34 { gamma, mu, sigma } => {
                let x0 = match &self.problem.initial_segment {
                    RawSegment::Constant { value } => *value,
                    RawSegment::Linear { at_zero, .. } => *at_zero,
                    RawSegment::Samples { values } => values.last().copied().unwrap_or(1.0),
                };
                Some(Example34Params { gamma: *gamma, mu: *mu, rho: self.discount(), sigma: *sigma, x0 })
            }
            _ => None,
        }
    }

    pub fn ex35_params(&self) -> Option<Example35Params> {
        match &self.problem.coefficients {
            CoefficientSelector::Example35 { gamma, mu, alpha, beta, sigma } => {
                let mut p = Example35Params {
                    gamma: *gamma,
                    mu: *mu,
                    rho: self.discount(),
                    delta: self.problem.delta,
                    alpha: 0.0,
                    beta: *beta,
                    sigma: *sigma,
                    lambda_avg: self.lambda_avg(),
                };
                p.alpha = alpha.unwrap_or_else(|| p.alpha_constraint());
                Some(p)
            }
            _ => None,
        }
    }

    /// The validated problem (grid alignment is checked by [`crate::model::build_problem`]).
    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        let control_set = ControlSet::new(p.control_bounds.lo, p.control_bounds.hi)?;
        let mut warnings = Warnings::default();
        let coeffs: Arc<dyn Coefficients> = match &p.coefficients {
            CoefficientSelector::Example34 { .. } => {
                let params = self.ex34_params().expect("selector checked");
                params.validate()?;
                warnings.gamma_outside_unit = !(params.gamma < 1.0);
                Arc::new(examples::Example34Coeffs { params })
            }
            CoefficientSelector::Example35 { .. } => {
                let params = self.ex35_params().expect("selector checked");
                params.validate()?;
                warnings.gamma_outside_unit = !(params.gamma < 1.0);
                warnings.alpha_constraint_violated = !params.constraint_satisfied();
                warnings.alpha_residual = Some(params.constraint_residual());
                Arc::new(examples::Example35Coeffs { params })
            }
            CoefficientSelector::LinearQuadratic(lq) => Arc::new(linear_quadratic(lq)),
            CoefficientSelector::CustomPolynomial { drift, diffusion, jump, reward, reward_discount } => {
                Arc::new(PolynomialCoeffs {
                    drift: drift.clone(),
                    diffusion: diffusion.clone(),
                    jump: jump.clone(),
                    reward: reward.clone(),
                    reward_discount: reward_discount.unwrap_or_else(|| self.discount()),
                })
            }
        };
        let jump = match &self.jump {
            Some(j) => Some(JumpModel::new(j.intensity, j.marks.clone())?),
            None => None,
        };
        let mut spec = ProblemSpec::new(p.delta, p.rho, coeffs, control_set, self.segment())?
            .with_lambda_avg(self.lambda_avg())?
            .with_discount(self.discount())?
            .with_jump(jump);
        spec.warnings = warnings;
        Ok(spec)
    }

    /// Resolve the candidate control of the `control` section.
    pub fn candidate(&self, grid: &TimeGrid) -> Result<ControlSpec> {
        let raw = self.control.clone().unwrap_or(RawControl::ClosedForm { p0: None, scale: None });
        match raw {
            RawControl::Constant { value } => Ok(ControlSpec::Constant(value)),
            RawControl::File { path } => read_control_file(Path::new(&path), grid),
            RawControl::ClosedForm { p0, scale } => {
                let base = self.closed_form(p0)?;
                Ok(match scale {
                    Some(f) if f != 1.0 => ControlSpec::Scaled { base: Box::new(base), factor: f },
                    _ => base,
                })
            }
            RawControl::ClosedFormOpenLoop => match (self.ex34_params(), self.ex35_params()) {
                (Some(p), _) => Ok(examples::ex34_open_loop(&p)),
                _ => Err(Error::Config("closed_form_open_loop needs the example_3_4 selector".into())),
            },
        }
    }

    /// The example's closed-form feedback control.
    pub fn closed_form(&self, p0: Option<f64>) -> Result<ControlSpec> {
        if let Some(p) = self.ex34_params() {
            let p0 = match p0 {
                Some(v) => v,
                None => examples::ex34_p0_star(&p)?,
            };
            return Ok(examples::ex34_feedback(&p, p0));
        }
        if let Some(p) = self.ex35_params() {
            let p0 = match p0 {
                Some(v) => v,
                None => examples::ex35_k(&p, &self.segment(), &examples::KSearch::default())?,
            };
            return Ok(examples::ex35_feedback(&p, p0));
        }
        Err(Error::Config("closed-form control is only defined for the example selectors".into()))
    }
}

/// Read an open-loop control table. Accepts `t,u` rows (header optional) or one value per line.
pub fn read_control_file(path: &Path, grid: &TimeGrid) -> Result<ControlSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let last = line.rsplit(',').next().unwrap_or(line).trim();
        match last.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if values.is_empty() => continue,
            Err(_) => return Err(Error::Config(format!("{}: bad value {last:?}", path.display()))),
        }
    }
    if values.len() < grid.n {
        return Err(Error::Config(format!(
            "{}: {} control values, grid needs at least {}",
            path.display(),
            values.len(),
            grid.n
        )));
    }
    Ok(ControlSpec::OpenLoop(values.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_problem;

    fn ex35_json(alpha: &str, dt: f64) -> String {
        format!(
            r#"{{
              "problem": {{
                "delta": 1.0, "rho": 0.1,
                "coefficients": {{"selector": "example_3_5", "gamma": 0.5, "mu": 0.05, "beta": 0.02 {alpha}}},
                "control_bounds": {{"lo": 0.0, "hi": 10.0}},
                "initial_segment": {{"kind": "constant", "value": 1.0}}
              }},
              "grid": {{"dt": {dt}, "horizon": 10.0}}
            }}"#
        )
    }

    #[test]
    fn accepts_aligned_grid() {
        let raw = RawConfig::from_json(&ex35_json("", 0.1)).unwrap();
        let spec = build_problem(&raw).unwrap();
        assert!(!spec.warnings.alpha_constraint_violated);
        assert_eq!(raw.grid().unwrap().m, 10);
    }

    #[test]
    fn rejects_misaligned_grid() {
        let raw = RawConfig::from_json(&ex35_json("", 0.3)).unwrap();
        assert!(matches!(build_problem(&raw), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn flags_violated_alpha() {
        let raw = RawConfig::from_json(&ex35_json(r#", "alpha": 0.5"#, 0.1)).unwrap();
        let spec = build_problem(&raw).unwrap();
        assert!(spec.warnings.alpha_constraint_violated);
        let p = raw.ex35_params().unwrap();
        let expected = 0.5 - p.c() * (0.05 + 0.1 + p.c());
        assert!((spec.warnings.alpha_residual.unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = ex35_json("", 0.1).replace("\"rho\"", "\"rhoo\": 1, \"rho\"");
        assert!(matches!(RawConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn lq_and_polynomial_selectors() {
        let text = r#"{
          "problem": {"delta": 0.5, "rho": 1.0,
            "coefficients": {"selector": "custom_polynomial",
               "drift": [{"coef": 0.1, "x": 1}], "reward": [{"coef": -1.0, "u": 2}]},
            "control_bounds": {"lo": -1, "hi": 1},
            "initial_segment": {"kind": "linear", "at_zero": 1.0, "slope": 0.0}},
          "jump": {"intensity": 1.0, "marks": {"kind": "uniform", "lo": 0.5, "hi": 1.5}},
          "grid": {"dt": 0.05, "horizon": 2.0}
        }"#;
        let raw = RawConfig::from_json(text).unwrap();
        let spec = build_problem(&raw).unwrap();
        assert!(spec.jump.is_some());
        assert!(!spec.has_jumps());
        let lq = text.replace(
            r#""selector": "custom_polynomial",
               "drift": [{"coef": 0.1, "x": 1}], "reward": [{"coef": -1.0, "u": 2}]"#,
            r#""selector": "linear_quadratic", "bx": 0.1, "ru": 2.0"#,
        );
        assert!(build_problem(&RawConfig::from_json(&lq).unwrap()).is_ok());
    }

    #[test]
    fn deterministic_build() {
        let a = RawConfig::from_json(&ex35_json("", 0.1)).unwrap();
        let b = RawConfig::from_json(&ex35_json("", 0.1)).unwrap();
        assert_eq!(a, b);
        let (sa, sb) = (build_problem(&a).unwrap(), build_problem(&b).unwrap());
        assert_eq!(format!("{sa:?}").len(), format!("{sb:?}").len());
        assert_eq!(sa.warnings, sb.warnings);
    }
}

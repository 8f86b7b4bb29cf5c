//! `delaymp` command-line driver. Every command reads a JSON config, applies
//! flag overrides, writes its outputs under `--out-dir` and a `manifest.json`.
//!
//! Exit codes: 0 ok, 1 usage or input error, 2 failed check or solver
//! failure, 3 inconclusive check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use delaymp::absde::{contraction_diagnostics, AdvancedDriver, SolverSettings};
use delaymp::adjoint::{
    p3_flatness, solve_first_adjoint, solve_second_adjoint, FirstAdjointDriver, PathPartials, SecondAdjointDriver,
};
use delaymp::config::{read_control_file, RawConfig};
use delaymp::examples::{
    ex34_adjoint, ex34_integral, ex34_integral_quadrature, ex34_p0_star, ex34_state, ex35_adjoint, ex35_k, KSearch,
};
use delaymp::forward::{simulate_ensemble, ControlSpec};
use delaymp::io::{num, with_file, write_adjoint_csv, write_json, write_objectives_csv, write_paths_csv};
use delaymp::model::{build_problem, InitialSegment, TimeGrid};
use delaymp::mp::{check_sufficient_first, check_sufficient_second, necessary_residual, CheckConfig, Verdict};
use delaymp::objective::estimate_many;
use delaymp::{Error, ProblemSpec};

#[derive(Parser, Debug)]
#[command(name = "delaymp", version, about = "Stochastic delay control: simulation, adjoints and maximum-principle checks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate paths of the candidate control.
    Simulate,
    /// Estimate the objective of the candidate control.
    Objective,
    /// Solve an adjoint system along simulated paths.
    Adjoint {
        #[arg(long, value_enum, default_value = "first")]
        system: System,
        #[arg(long)]
        weight_lambda: Option<f64>,
    },
    /// Check a maximum principle at a control.
    Check {
        #[arg(long, value_enum)]
        principle: Principle,
        /// `closed_form`, `closed_form_open_loop`, `constant:<u>` or `file:<path>`.
        #[arg(long)]
        control: Option<String>,
    },
    /// Closed-form quantities of the consumption example without delay.
    Example34,
    /// Closed-form quantities of the consumption example with delay.
    Example35,
    /// Picard schedule with contraction ratios and weight diagnostics.
    PicardDiagnostics {
        #[arg(long, value_enum, default_value = "first")]
        system: System,
        #[arg(long)]
        weight_lambda: Option<f64>,
    },
    /// Objective estimates over a list of values of one parameter.
    Sweep {
        /// Parameter name (`gamma`, `rho`, `seed`, ...) or dotted config path.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
enum System {
    First,
    Second,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Principle {
    Sufficient1,
    Sufficient2,
    Necessary,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    config_sha256: Option<String>,
    seed: u64,
    paths: usize,
    threads: usize,
    started_unix: f64,
    finished_unix: f64,
    versions: Vec<(String, String)>,
    outputs: Vec<String>,
    exit_code: u8,
}

struct Run {
    global: Global,
    raw: RawConfig,
    config_bytes: Option<Vec<u8>>,
    outputs: Vec<String>,
}

impl Run {
    fn load(global: &Global) -> CliResult<Self> {
        let path = global.config.as_ref().ok_or_else(|| Failure::Usage("--config is required".into()))?;
        let bytes = std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Failure::Usage(format!("config {} is not UTF-8", path.display())))?;
        let mut raw = RawConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        if let Some(s) = global.seed {
            raw.mc.seed = s;
        }
        if let Some(n) = global.paths {
            raw.mc.paths = n;
        }
        if let Some(dt) = global.dt {
            raw.grid.dt = dt;
        }
        if let Some(h) = global.horizon {
            raw.grid.horizon = h;
        }
        std::fs::create_dir_all(&global.out_dir)?;
        Ok(Self { global: global.clone(), raw, config_bytes: Some(bytes), outputs: Vec::new() })
    }

    fn problem(&self) -> CliResult<(ProblemSpec, TimeGrid)> {
        let spec = build_problem(&self.raw).map_err(usage_if_input)?;
        let grid = self.raw.grid().map_err(usage_if_input)?;
        for w in spec.warnings.messages() {
            eprintln!("warning: {w}");
        }
        Ok((spec, grid))
    }

    /// Grid used for adjoint solves: the config's adjoint horizon when longer.
    fn adjoint_grid(&self, grid: &TimeGrid) -> CliResult<TimeGrid> {
        match self.raw.solver.adjoint_horizon {
            Some(h) if h > grid.horizon => Ok(grid.with_horizon(h)?),
            _ => Ok(*grid),
        }
    }

    fn settings(&self, weight_lambda: Option<f64>) -> SolverSettings {
        let s = &self.raw.solver;
        SolverSettings {
            mode: s.mode,
            schedule: s.schedule,
            weight_lambda: weight_lambda.or(s.weight_lambda),
            tol: s.picard_tol,
            max_iter: s.picard_max_iter,
            basis_degree: s.basis_degree,
            ..Default::default()
        }
    }

    fn out(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.global.out_dir.join(name)
    }

    fn write_manifest(&mut self, command: &str, started: f64, exit_code: u8) -> CliResult<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: self.global.config.as_ref().map(|p| p.display().to_string()),
            config_sha256: self.config_bytes.as_ref().map(|b| hex(&Sha256::digest(b))),
            seed: self.raw.mc.seed,
            paths: self.raw.mc.paths,
            threads: rayon::current_num_threads(),
            started_unix: started,
            finished_unix: now(),
            versions: vec![
                ("delaymp".into(), delaymp_version().into()),
                ("delaymp-cli".into(), env!("CARGO_PKG_VERSION").into()),
            ],
            outputs: self.outputs.clone(),
            exit_code,
        };
        let path = self.global.out_dir.join("manifest.json");
        with_file(&path, |w| write_json(w, &manifest))?;
        Ok(())
    }
}

fn delaymp_version() -> &'static str {
    // The library and the CLI are versioned together in this workspace.
    env!("CARGO_PKG_VERSION")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Configuration problems are usage errors rather than run failures.
fn usage_if_input(e: Error) -> Failure {
    match e {
        Error::GridMismatch { .. }
        | Error::BadInterval { .. }
        | Error::InvalidParameter(_)
        | Error::NonFiniteSegment { .. }
        | Error::Config(_) => Failure::Usage(e.to_string()),
        other => Failure::Run(other),
    }
}

fn parse_control(raw: &RawConfig, grid: &TimeGrid, arg: Option<&str>) -> CliResult<ControlSpec> {
    let Some(arg) = arg else {
        return raw.candidate(grid).map_err(usage_if_input);
    };
    let res = if arg == "closed_form" {
        raw.closed_form(None)
    } else if arg == "closed_form_open_loop" {
        let mut r = raw.clone();
        r.control = Some(delaymp::config::RawControl::ClosedFormOpenLoop);
        r.candidate(grid)
    } else if let Some(v) = arg.strip_prefix("constant:") {
        v.parse::<f64>()
            .map(ControlSpec::Constant)
            .map_err(|_| Error::Config(format!("bad constant control `{v}`")))
    } else if let Some(p) = arg.strip_prefix("file:") {
        read_control_file(Path::new(p), grid)
    } else {
        return Err(Failure::Usage(format!("unknown control `{arg}`")));
    };
    res.map_err(usage_if_input)
}

fn cmd_simulate(run: &mut Run) -> CliResult<u8> {
    let (spec, grid) = run.problem()?;
    let control = run.raw.candidate(&grid).map_err(usage_if_input)?;
    let ens = simulate_ensemble(&spec, &grid, &control, run.raw.mc.paths, run.raw.mc.seed)?;
    let path = run.out("paths.csv");
    with_file(&path, |w| write_paths_csv(w, &ens))?;
    let exited = ens.paths.iter().filter(|p| p.exit_step.is_some()).count();
    println!("simulated {} paths x {} steps; {} left the domain", ens.len(), grid.n, exited);
    Ok(0)
}

fn cmd_objective(run: &mut Run) -> CliResult<u8> {
    let (spec, grid) = run.problem()?;
    let control = run.raw.candidate(&grid).map_err(usage_if_input)?;
    let batch = estimate_many(&spec, &grid, &[control], run.raw.mc.paths, run.raw.mc.seed)?;
    let est = batch.estimates[0];
    let csv = run.out("objectives.csv");
    with_file(&csv, |w| write_objectives_csv(w, &batch.values[0]))?;
    let json = run.out("objective.json");
    with_file(&json, |w| write_json(w, &est))?;
    println!("J = {} +- {} (tail bound {}, {} exited)", num(est.mean), num(est.stderr), num(est.tail_bound), est.exited_paths);
    Ok(0)
}

fn solve(
    spec: &ProblemSpec,
    ens: &delaymp::forward::Ensemble,
    system: System,
    settings: &SolverSettings,
) -> delaymp::Result<(delaymp::absde::AdjointTriple, delaymp::absde::PicardReport)> {
    match system {
        System::First => solve_first_adjoint(spec, ens, settings),
        System::Second => solve_second_adjoint(spec, ens, settings),
    }
}

fn cmd_adjoint(run: &mut Run, system: System, weight_lambda: Option<f64>) -> CliResult<u8> {
    let (spec, grid) = run.problem()?;
    let grid = run.adjoint_grid(&grid)?;
    let control = run.raw.candidate(&grid).map_err(usage_if_input)?;
    let ens = simulate_ensemble(&spec, &grid, &control, run.raw.mc.paths, run.raw.mc.seed)?;
    let settings = run.settings(weight_lambda);
    let report_path = run.out("picard_report.json");
    match solve(&spec, &ens, system, &settings) {
        Ok((adj, report)) => {
            let csv = run.out("adjoint.csv");
            with_file(&csv, |w| write_adjoint_csv(w, &adj))?;
            with_file(&report_path, |w| write_json(w, &report))?;
            println!(
                "converged in {} iterations, last ratio {}",
                report.iterations,
                report.ratios.last().map_or("-".into(), |r| num(*r))
            );
            if system == System::Second {
                let (flat, dev) = p3_flatness(&adj.mean_p(2), 1e-6);
                println!("p3 flat: {flat} (max |p3| = {})", num(dev));
            }
            Ok(0)
        }
        Err(e) => {
            let Some(report) = e.picard_report() else { return Err(e.into()) };
            #[derive(Serialize)]
            struct Failed<'a> {
                error: String,
                report: &'a delaymp::absde::PicardReport,
            }
            with_file(&report_path, |w| write_json(w, &Failed { error: e.to_string(), report }))?;
            eprintln!("error: {e}");
            Ok(2)
        }
    }
}

fn cmd_picard_diagnostics(run: &mut Run, system: System, weight_lambda: Option<f64>) -> CliResult<u8> {
    let (spec, grid) = run.problem()?;
    let grid = run.adjoint_grid(&grid)?;
    let control = run.raw.candidate(&grid).map_err(usage_if_input)?;
    let ens = simulate_ensemble(&spec, &grid, &control, run.raw.mc.paths, run.raw.mc.seed)?;
    let mut settings = run.settings(weight_lambda);
    settings.schedule = delaymp::absde::Schedule::Picard;
    let partials = PathPartials::new(&spec, &ens);
    let lipschitz = match system {
        System::First => FirstAdjointDriver::new(&spec, &grid, &partials).lipschitz(),
        System::Second => SecondAdjointDriver::new(&spec, &partials).lipschitz(),
    };
    let (report, code, error) = match solve(&spec, &ens, system, &settings) {
        Ok((_, r)) => (r, 0, None),
        Err(e) => match e.picard_report() {
            Some(r) => (r.clone(), 2, Some(e.to_string())),
            None => return Err(e.into()),
        },
    };
    let verdict = contraction_diagnostics(&report, lipschitz, spec.delta);
    #[derive(Serialize)]
    struct Diagnostics {
        system: System,
        error: Option<String>,
        contraction: delaymp::absde::ContractionVerdict,
        report: delaymp::absde::PicardReport,
    }
    let path = run.out("picard_diagnostics.json");
    let out = Diagnostics { system, error, contraction: verdict, report };
    with_file(&path, |w| write_json(w, &out))?;
    println!(
        "lambda used {} (lambda* {}), measured ratio {}, within 1/2: {}",
        num(out.contraction.lambda_used),
        num(out.contraction.lambda_star),
        num(out.contraction.measured_ratio),
        out.contraction.within_half
    );
    if let Some(e) = &out.error {
        eprintln!("error: {e}");
    }
    Ok(code)
}

fn check_config(run: &Run) -> CheckConfig {
    CheckConfig {
        n_paths: run.raw.mc.paths,
        seed: run.raw.mc.seed,
        solver: run.settings(None),
        ..Default::default()
    }
}

fn cmd_check(run: &mut Run, principle: Principle, control: Option<&str>) -> CliResult<u8> {
    let (spec, grid) = run.problem()?;
    let candidate = parse_control(&run.raw, &grid, control)?;
    let cfg = check_config(run);
    let json = run.out("check_report.json");
    let (verdict, text) = match principle {
        Principle::Necessary => {
            let r = necessary_residual(&spec, &grid, &candidate, &cfg)?;
            with_file(&json, |w| write_json(w, &r))?;
            (r.verdict, r.summary())
        }
        Principle::Sufficient1 | Principle::Sufficient2 => {
            let comparisons = [candidate.scaled(0.8), candidate.scaled(1.2)];
            let r = if principle == Principle::Sufficient1 {
                check_sufficient_first(&spec, &grid, &candidate, &comparisons, &cfg)?
            } else {
                check_sufficient_second(&spec, &grid, &candidate, &comparisons, &cfg)?
            };
            with_file(&json, |w| write_json(w, &r))?;
            (r.verdict, r.summary())
        }
    };
    let txt = run.out("check_report.txt");
    std::fs::write(&txt, &text)?;
    print!("{text}");
    Ok(verdict_code(verdict))
}

fn verdict_code(v: Verdict) -> u8 {
    v.exit_code() as u8
}

fn cmd_example34(run: &mut Run) -> CliResult<u8> {
    let params = run
        .raw
        .ex34_params()
        .ok_or_else(|| Failure::Usage("example34 needs the example_3_4 coefficient selector".into()))?;
    let grid = run.raw.grid().map_err(usage_if_input)?;
    let p0 = ex34_p0_star(&params)?;
    #[derive(Serialize)]
    struct Summary {
        params: delaymp::examples::Example34Params,
        k: f64,
        integral: f64,
        integral_quadrature: f64,
        p0_star: f64,
    }
    let s = Summary {
        params,
        k: params.k(),
        integral: ex34_integral(&params)?,
        integral_quadrature: ex34_integral_quadrature(&params, grid.horizon),
        p0_star: p0,
    };
    let json = run.out("example34.json");
    with_file(&json, |w| write_json(w, &s))?;
    let csv = run.out("example34.csv");
    with_file(&csv, |w| {
        use std::io::Write;
        writeln!(w, "t,X,p1,u")?;
        for k in 0..=grid.n {
            let t = grid.t(k);
            writeln!(w, "{},{},{},{}", num(t), num(ex34_state(&params, t)), num(ex34_adjoint(&params, t, p0)), num(params.k()))?;
        }
        Ok(())
    })?;
    println!("k = {}, p1(0) = {}", num(s.k), num(p0));
    Ok(0)
}

fn cmd_example35(run: &mut Run) -> CliResult<u8> {
    let params = run
        .raw
        .ex35_params()
        .ok_or_else(|| Failure::Usage("example35 needs the example_3_5 coefficient selector".into()))?;
    let grid = run.raw.grid().map_err(usage_if_input)?;
    let segment = match run.raw.problem.initial_segment.clone() {
        delaymp::config::RawSegment::Constant { value } => InitialSegment::Constant(value),
        delaymp::config::RawSegment::Linear { at_zero, slope } => InitialSegment::Linear { at_zero, slope },
        delaymp::config::RawSegment::Samples { values } => InitialSegment::Samples(values),
    };
    let k = ex35_k(&params, &segment, &KSearch::default())?;
    #[derive(Serialize)]
    struct Summary {
        params: delaymp::examples::Example35Params,
        c: f64,
        alpha_constraint: f64,
        constraint_residual: f64,
        constraint_satisfied: bool,
        k: f64,
    }
    let s = Summary {
        params,
        c: params.c(),
        alpha_constraint: params.alpha_constraint(),
        constraint_residual: params.constraint_residual(),
        constraint_satisfied: params.constraint_satisfied(),
        k,
    };
    let json = run.out("example35.json");
    with_file(&json, |w| write_json(w, &s))?;
    let csv = run.out("example35.csv");
    with_file(&csv, |w| {
        use std::io::Write;
        writeln!(w, "t,p1")?;
        for i in 0..=grid.n {
            let t = grid.t(i);
            writeln!(w, "{},{}", num(t), num(ex35_adjoint(&params, t, k)))?;
        }
        Ok(())
    })?;
    println!("K = {}, alpha residual {}", num(k), num(s.constraint_residual));
    Ok(0)
}

/// Short names accepted by `sweep`, mapped to config paths.
const SWEEP_ALIASES: &[(&str, &str)] = &[
    ("delta", "problem.delta"),
    ("rho", "problem.rho"),
    ("lambda_avg", "problem.lambda_avg"),
    ("discount", "problem.discount"),
    ("gamma", "problem.coefficients.gamma"),
    ("mu", "problem.coefficients.mu"),
    ("sigma", "problem.coefficients.sigma"),
    ("alpha", "problem.coefficients.alpha"),
    ("beta", "problem.coefficients.beta"),
    ("dt", "grid.dt"),
    ("horizon", "grid.horizon"),
    ("seed", "mc.seed"),
    ("paths", "mc.paths"),
];

fn set_param(cfg: &RawConfig, name: &str, value: f64) -> CliResult<RawConfig> {
    let path = SWEEP_ALIASES.iter().find(|(a, _)| *a == name).map_or(name, |(_, p)| p);
    let mut tree = serde_json::to_value(cfg).map_err(|e| Failure::Run(e.into()))?;
    let (parents, leaf) = match path.rsplit_once('.') {
        Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
        None => (Vec::new(), path),
    };
    let mut node = &mut tree;
    for key in parents {
        node = node
            .get_mut(key)
            .filter(|v| v.is_object())
            .ok_or_else(|| Failure::Usage(format!("unknown parameter `{name}`")))?;
    }
    let obj = node.as_object_mut().ok_or_else(|| Failure::Usage(format!("unknown parameter `{name}`")))?;
    if !obj.contains_key(leaf) {
        return Err(Failure::Usage(format!("unknown parameter `{name}`")));
    }
    let v = if matches!(leaf, "seed" | "paths") {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(Failure::Usage(format!("`{name}` needs a non-negative integer, got {value}")));
        }
        Value::from(value as u64)
    } else {
        Value::from(value)
    };
    obj.insert(leaf.to_string(), v);
    serde_json::from_value(tree).map_err(|e| Failure::Usage(format!("`{name}` = {value}: {e}")))
}

fn cmd_sweep(run: &mut Run, param: &str, values: &[f64]) -> CliResult<u8> {
    if values.is_empty() {
        return Err(Failure::Usage("--values is empty".into()));
    }
    let configs = values.iter().map(|v| set_param(&run.raw, param, *v)).collect::<CliResult<Vec<_>>>()?;
    let path = run.out("sweep.csv");
    let mut rows = Vec::new();
    for (v, cfg) in values.iter().zip(&configs) {
        let spec = build_problem(cfg).map_err(usage_if_input)?;
        let grid = cfg.grid().map_err(usage_if_input)?;
        let control = cfg.candidate(&grid).map_err(usage_if_input)?;
        let est = estimate_many(&spec, &grid, &[control], cfg.mc.paths, cfg.mc.seed)?.estimates[0];
        rows.push(format!(
            "{param},{},{},{},{},{},{}",
            num(*v),
            num(est.mean),
            num(est.stderr),
            num(est.tail_bound),
            est.exited_paths,
            est.n_paths
        ));
        println!("{param} = {v}: J = {:.6} +- {:.2e}", est.mean, est.stderr);
    }
    with_file(&path, |w| {
        use std::io::Write;
        writeln!(w, "param,value,J,stderr,tail_bound,exited_paths,n_paths")?;
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })?;
    Ok(0)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate => "simulate",
        Command::Objective => "objective",
        Command::Adjoint { .. } => "adjoint",
        Command::Check { .. } => "check",
        Command::Example34 => "example34",
        Command::Example35 => "example35",
        Command::PicardDiagnostics { .. } => "picard-diagnostics",
        Command::Sweep { .. } => "sweep",
    }
}

fn execute(cli: &Cli) -> CliResult<u8> {
    let started = now();
    let mut run = Run::load(&cli.global)?;
    let code = match &cli.command {
        Command::Simulate => cmd_simulate(&mut run)?,
        Command::Objective => cmd_objective(&mut run)?,
        Command::Adjoint { system, weight_lambda } => cmd_adjoint(&mut run, *system, *weight_lambda)?,
        Command::Check { principle, control } => cmd_check(&mut run, *principle, control.as_deref())?,
        Command::Example34 => cmd_example34(&mut run)?,
        Command::Example35 => cmd_example35(&mut run)?,
        Command::PicardDiagnostics { system, weight_lambda } => {
            cmd_picard_diagnostics(&mut run, *system, *weight_lambda)?
        }
        Command::Sweep { param, values } => cmd_sweep(&mut run, param, values)?,
    };
    run.write_manifest(command_name(&cli.command), started, code)?;
    Ok(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) | Error::Json(_) => 1,
                _ => 2,
            })
        }
    }
}

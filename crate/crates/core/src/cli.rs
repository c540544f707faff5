//! Command-line front end: configuration resolution, the subcommands, and
//! CSV/manifest emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::enkf::TerminalNoise;
use crate::error::{Error, Result};
use crate::problem::{AffineControlSchedule, ControlProblem};
use crate::rng::Streams;
use crate::scenarios;
use crate::solver::{self, Backend, SolverConfig, SweepRecord};

#[derive(Debug, Parser)]
#[command(name = "mkv", version, about = "Mean-field particle solver for stochastic optimal control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the affine feedback law; writes forward.csv, reverse.csv and control.csv.
    Solve(CommonArgs),
    /// Simulate the controlled SDE; writes trajectory.csv.
    Simulate(PathArgs),
    /// Monte-Carlo cost of a control law; writes cost.txt.
    Cost(PathArgs),
    /// List the built-in scenarios.
    Scenarios,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long = "ensemble-size")]
    pub ensemble_size: Option<usize>,
    #[arg(long, value_parser = ["enkf", "dmap"])]
    pub backend: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PathArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of simulated paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Noise scale of the simulated SDE (0 gives deterministic paths).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Use u ≡ 0 instead of a solved law.
    #[arg(long = "zero-control")]
    pub zero_control: bool,
    /// Read the control law from this control.csv instead of solving.
    #[arg(long)]
    pub control: Option<PathBuf>,
}

/// `[solver]` section; every key optional so files can override a subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inflation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<Backend>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_dm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal_noise: Option<TerminalNoise>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_forward_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_forward_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_forward_rest: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_reverse_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_reverse_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_reverse_rest: Option<f64>,
}

impl SolverSection {
    fn apply(&self, cfg: &mut SolverConfig) {
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { cfg.$field = v; })*};
        }
        set!(dt, ensemble_size, inflation, backend, seed, record_every, terminal_noise);
        if self.eps_dm.is_some() {
            cfg.eps_dm = self.eps_dm;
        }
        let f = &mut cfg.eps_forward;
        f.initial = self.eps_forward_initial.unwrap_or(f.initial);
        f.initial_steps = self.eps_forward_steps.unwrap_or(f.initial_steps);
        f.rest = self.eps_forward_rest.unwrap_or(f.rest);
        let r = &mut cfg.eps_reverse;
        r.initial = self.eps_reverse_initial.unwrap_or(r.initial);
        r.initial_steps = self.eps_reverse_steps.unwrap_or(r.initial_steps);
        r.rest = self.eps_reverse_rest.unwrap_or(r.rest);
    }

    fn resolved(cfg: &SolverConfig) -> Self {
        Self {
            dt: Some(cfg.dt),
            ensemble_size: Some(cfg.ensemble_size),
            inflation: Some(cfg.inflation),
            backend: Some(cfg.backend),
            eps_dm: Some(cfg.eps_dm()),
            seed: Some(cfg.seed),
            record_every: Some(cfg.record_every),
            terminal_noise: Some(cfg.terminal_noise),
            eps_forward_initial: Some(cfg.eps_forward.initial),
            eps_forward_steps: Some(cfg.eps_forward.initial_steps),
            eps_forward_rest: Some(cfg.eps_forward.rest),
            eps_reverse_initial: Some(cfg.eps_reverse.initial),
            eps_reverse_steps: Some(cfg.eps_reverse.initial_steps),
            eps_reverse_rest: Some(cfg.eps_reverse.rest),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_control: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<PathBuf>,
}

/// Linear-Gaussian problem given inline:
/// `b = F x + f₀`, constant `G` and `σ`, `h = H x + h₀`, `ξ = Ξ x + ξ₀`.
/// Matrices are lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub drift_matrix: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_offset: Option<Vec<f64>>,
    pub gain: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub running_matrix: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub running_offset: Option<Vec<f64>>,
    pub running_weight: Vec<Vec<f64>>,
    pub terminal_matrix: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal_offset: Option<Vec<f64>>,
    pub terminal_weight: Vec<Vec<f64>>,
    pub control_weight: Vec<Vec<f64>>,
    pub horizon: f64,
    pub start: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_cov: Option<Vec<Vec<f64>>>,
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{name} must be a non-empty rectangular list of rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn offset(v: &Option<Vec<f64>>, len: usize, name: &str) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::Config(format!("{name} has length {}, expected {len}", v.len()))),
    }
}

impl ProblemSpec {
    pub fn build(&self) -> Result<ControlProblem> {
        let f = matrix(&self.drift_matrix, "drift_matrix")?;
        let d = f.nrows();
        let f0 = offset(&self.drift_offset, d, "drift_offset")?;
        let hm = matrix(&self.running_matrix, "running_matrix")?;
        let h0 = offset(&self.running_offset, hm.nrows(), "running_offset")?;
        let xm = matrix(&self.terminal_matrix, "terminal_matrix")?;
        let x0 = offset(&self.terminal_offset, xm.nrows(), "terminal_offset")?;
        if hm.ncols() != d || xm.ncols() != d {
            return Err(Error::Config("cost maps must have d_x columns".into()));
        }
        let mut b = ControlProblem::builder(d)
            .drift(move |x| &f * x + &f0)
            .constant_gain(matrix(&self.gain, "gain")?)
            .constant_noise(matrix(&self.noise, "noise")?)
            .running_cost(move |x| &hm * x + &h0, matrix(&self.running_weight, "running_weight")?)
            .terminal_cost(move |x| &xm * x + &x0, matrix(&self.terminal_weight, "terminal_weight")?)
            .control_weight(matrix(&self.control_weight, "control_weight")?)
            .horizon(self.horizon)
            .start(DVector::from_column_slice(&self.start));
        if let Some(c) = &self.initial_cov {
            b = b.initial_cov(matrix(c, "initial_cov")?);
        }
        b.build()
    }
}

/// Contents of a `--config` file and of the emitted manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved run: problem, solver settings, and command flags.
pub struct RunConfig {
    pub scenario: Option<String>,
    pub problem_spec: Option<ProblemSpec>,
    pub problem: ControlProblem,
    pub solver: SolverConfig,
    pub out: PathBuf,
    pub run: RunSection,
}

impl RunConfig {
    pub fn resolve(common: &CommonArgs, path: Option<&PathArgs>) -> Result<Self> {
        let file = match &common.config {
            Some(p) => ConfigFile::read(p)?,
            None => ConfigFile::default(),
        };
        let scenario = common.scenario.clone().or(file.scenario.clone());
        let (problem, problem_spec, mut solver) = match (&scenario, &file.problem) {
            (Some(name), _) => {
                let sc = scenarios::find(name)?;
                ((sc.problem)()?, None, (sc.config)())
            }
            (None, Some(spec)) => (spec.build()?, Some(spec.clone()), SolverConfig::default()),
            (None, None) => return Err(Error::Config("need --scenario or a config with a [problem] section".into())),
        };
        file.solver.apply(&mut solver);
        if let Some(s) = common.seed {
            solver.seed = s;
        }
        if let Some(dt) = common.dt {
            solver.dt = dt;
        }
        if let Some(m) = common.ensemble_size {
            solver.ensemble_size = m;
        }
        if let Some(b) = &common.backend {
            solver.backend = b.parse()?;
        }
        solver.validate()?;
        let mut run = file.run.clone();
        if let Some(pa) = path {
            if pa.paths.is_some() {
                run.paths = pa.paths;
            }
            if pa.rho.is_some() {
                run.rho = pa.rho;
            }
            run.zero_control |= pa.zero_control;
            if pa.control.is_some() {
                run.control = pa.control.clone();
            }
        }
        let out = common.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            scenario,
            problem_spec,
            problem,
            solver,
            out,
            run,
        })
    }

    pub fn manifest(&self) -> ConfigFile {
        ConfigFile {
            scenario: self.scenario.clone(),
            out: Some(self.out.clone()),
            solver: SolverSection::resolved(&self.solver),
            run: self.run.clone(),
            problem: self.problem_spec.clone(),
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn moments_header(d: usize) -> String {
    let mut h = String::from("t");
    for i in 1..=d {
        write!(h, ",m_{i}").unwrap();
    }
    for i in 1..=d {
        for j in 1..=d {
            write!(h, ",C_{i}{j}").unwrap();
        }
    }
    h
}

pub fn control_header(d: usize) -> String {
    let mut h = String::from("t");
    for i in 1..=d {
        for j in 1..=d {
            write!(h, ",A_{i}{j}").unwrap();
        }
    }
    for i in 1..=d {
        write!(h, ",c_{i}").unwrap();
    }
    h
}

fn trajectory_header(dx: usize, du: usize) -> String {
    let mut h = String::from("t");
    for i in 1..=dx {
        write!(h, ",x_{i}").unwrap();
    }
    for i in 1..=du {
        write!(h, ",u_{i}").unwrap();
    }
    h
}

fn push_row(out: &mut String, t: f64, vals: impl IntoIterator<Item = f64>) {
    out.push_str(&num(t));
    for v in vals {
        out.push(',');
        out.push_str(&num(v));
    }
    out.push('\n');
}

/// Row-major entries of a square matrix.
fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

pub fn moments_csv(record: &SweepRecord, reverse: bool, stride: usize) -> String {
    let d = record.bar[0].dim();
    let mut out = moments_header(d);
    out.push('\n');
    for n in record.recorded_indices(stride) {
        let m = if reverse { &record.tilde[n] } else { &record.bar[n] };
        push_row(&mut out, record.times[n], m.mean().iter().copied().chain(row_major(m.cov())));
    }
    out
}

pub fn control_csv(sched: &AffineControlSchedule) -> String {
    let mut out = control_header(sched.dim());
    out.push('\n');
    for ((t, a), c) in sched.times().iter().zip(sched.gains()).zip(sched.shifts()) {
        push_row(&mut out, *t, row_major(a).chain(c.iter().copied()));
    }
    out
}

pub fn read_control_csv(text: &str) -> Result<AffineControlSchedule> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty control file".into()))?;
    let cols = header.split(',').count();
    // 1 + d² + d columns
    let d = (((4 * cols - 3) as f64).sqrt() as usize).saturating_sub(1) / 2;
    if d == 0 || header != control_header(d) {
        return Err(Error::Config(format!("unexpected control header '{header}'")));
    }
    let (mut times, mut gains, mut shifts) = (Vec::new(), Vec::new(), Vec::new());
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("control row {}: {e}", k + 2)))?;
        if vals.len() != cols {
            return Err(Error::Config(format!("control row {} has {} columns", k + 2, vals.len())));
        }
        times.push(vals[0]);
        gains.push(DMatrix::from_row_slice(d, d, &vals[1..1 + d * d]));
        shifts.push(DVector::from_column_slice(&vals[1 + d * d..]));
    }
    AffineControlSchedule::new(times, gains, shifts)
}

pub fn trajectory_csv(traj: &solver::Trajectory) -> String {
    let mut out = trajectory_header(traj.states[0].len(), traj.controls[0].len());
    out.push('\n');
    for ((t, x), u) in traj.times.iter().zip(&traj.states).zip(&traj.controls) {
        push_row(&mut out, *t, x.iter().copied().chain(u.iter().copied()));
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_manifest(cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string(&cfg.manifest()).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    write(&cfg.out, "manifest.toml", &text)
}

fn solve_and_write(cfg: &RunConfig) -> Result<AffineControlSchedule> {
    let sol = solver::solve(&cfg.problem, &cfg.solver)?;
    let stride = cfg.solver.record_every;
    write(&cfg.out, "forward.csv", &moments_csv(&sol.record, false, stride))?;
    write(&cfg.out, "reverse.csv", &moments_csv(&sol.record, true, stride))?;
    write(&cfg.out, "control.csv", &control_csv(&sol.schedule))?;
    let d = &sol.record.diagnostics;
    if d.kernels_built > 0 {
        eprintln!(
            "diffusion maps: {} kernels, max Sinkhorn residual {:.3e}/{:.3e}, {} hull checks, min weight {:.3e}",
            d.kernels_built, d.max_row_residual, d.max_col_residual, d.hull_checks, d.min_weight
        );
    }
    Ok(sol.schedule)
}

fn control_law(cfg: &RunConfig) -> Result<AffineControlSchedule> {
    if cfg.run.zero_control {
        let grid = cfg.solver.grid(&cfg.problem)?;
        return AffineControlSchedule::zeros(grid.times, cfg.problem.dim_x());
    }
    match &cfg.run.control {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            read_control_csv(&text)
        }
        None => solve_and_write(cfg),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scenarios => {
            for s in scenarios::ALL {
                println!("{:<14}{}", s.name, s.summary);
            }
            Ok(())
        }
        Command::Solve(common) => {
            let cfg = RunConfig::resolve(&common, None)?;
            fs::create_dir_all(&cfg.out)?;
            write_manifest(&cfg)?;
            solve_and_write(&cfg)?;
            Ok(())
        }
        Command::Simulate(pa) => {
            let cfg = RunConfig::resolve(&pa.common, Some(&pa))?;
            fs::create_dir_all(&cfg.out)?;
            write_manifest(&cfg)?;
            let sched = control_law(&cfg)?;
            let n = cfg.run.paths.unwrap_or(1).max(1);
            let paths = solver::simulate_controlled(&cfg.problem, &sched, cfg.run.rho, n, &Streams::new(cfg.solver.seed))?;
            for (k, p) in paths.iter().enumerate() {
                let name = if k == 0 {
                    "trajectory.csv".to_string()
                } else {
                    format!("trajectory_{k}.csv")
                };
                write(&cfg.out, &name, &trajectory_csv(p))?;
            }
            Ok(())
        }
        Command::Cost(pa) => {
            let cfg = RunConfig::resolve(&pa.common, Some(&pa))?;
            fs::create_dir_all(&cfg.out)?;
            write_manifest(&cfg)?;
            let sched = control_law(&cfg)?;
            let n = cfg.run.paths.unwrap_or(100);
            let est = solver::estimate_cost(&cfg.problem, &sched, cfg.run.rho, n, &Streams::new(cfg.solver.seed))?;
            let line = format!("{} ± {}", num(est.mean), num(est.std_error));
            println!("{line}");
            write(&cfg.out, "cost.txt", &(line + "\n"))
        }
    }
}

/// Process exit code: 2 for configuration errors, 3 for numerical
/// failures, 1 for I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

/// Sizes the global thread pool from `MKV_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MKV_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("MKV_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::EpsSchedule;

    #[test]
    fn headers() {
        assert_eq!(moments_header(2), "t,m_1,m_2,C_11,C_12,C_21,C_22");
        assert_eq!(control_header(1), "t,A_11,c_1");
        assert_eq!(trajectory_header(2, 1), "t,x_1,x_2,u_1");
    }

    #[test]
    fn control_csv_round_trips_exactly() {
        let times = vec![0.0, 0.1, 0.30000000000000004];
        let gains = vec![DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.1, 0.1, -2e-300]); 3];
        let shifts = vec![DVector::from_vec(vec![std::f64::consts::PI, -1e20]); 3];
        let s = AffineControlSchedule::new(times, gains, shifts).unwrap();
        let back = read_control_csv(&control_csv(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_control_header() {
        assert!(read_control_csv("t,A_11,c_2\n0,0,0\n").is_err());
    }

    #[test]
    fn solver_section_overrides() {
        let text = "scenario = \"lq\"\n[solver]\ndt = 0.01\nbackend = \"dmap_enkf\"\neps_forward_steps = 3\n";
        let f: ConfigFile = toml::from_str(text).unwrap();
        let mut cfg = SolverConfig::default();
        f.solver.apply(&mut cfg);
        assert_eq!(cfg.dt, 0.01);
        assert_eq!(cfg.backend, Backend::DmapEnkf);
        assert_eq!(cfg.eps_forward, EpsSchedule::first_steps(3, 1.0, 0.0));
    }

    #[test]
    fn manifest_round_trips() {
        let common = CommonArgs {
            scenario: Some("lq".into()),
            seed: Some(7),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&common, None).unwrap();
        let text = toml::to_string(&cfg.manifest()).unwrap();
        let back: ConfigFile = toml::from_str(&text).unwrap();
        let mut again = scenarios::lq_config();
        back.solver.apply(&mut again);
        assert_eq!(again.seed, 7);
        assert_eq!(SolverSection::resolved(&again), SolverSection::resolved(&cfg.solver));
    }

    #[test]
    fn inline_problem_builds() {
        let text = r#"
[problem]
drift_matrix = [[-0.5]]
gain = [[1.0]]
noise = [[1.0]]
running_matrix = [[1.0]]
running_weight = [[1.0]]
terminal_matrix = [[1.0]]
terminal_weight = [[1.0]]
control_weight = [[1.0]]
horizon = 1.0
start = [1.0]
"#;
        let f: ConfigFile = toml::from_str(text).unwrap();
        let p = f.problem.unwrap().build().unwrap();
        assert_eq!(p.drift(&DVector::from_element(1, 2.0))[0], -1.0);
    }

    #[test]
    fn exit_codes_distinguish_failures() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::CovarianceCollapse { step: 1, t: 0.0 }), 3);
    }
}

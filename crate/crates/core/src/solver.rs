//! Forward sweep, terminal update, reverse sweep (EnKF or split-step
//! diffusion-map backend), schedule assembly, and evaluation of the
//! resulting feedback law on the controlled SDE.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dmap::DiffusionMapOperator;
use crate::enkf::{self, GainPair, TerminalNoise, TildeDrift};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, sym_sqrt};
use crate::problem::{AffineControlSchedule, ControlProblem};
use crate::rng::{Purpose, Streams};
use crate::stats::{self, Ensemble, EmpiricalMoments};

/// Below this many particles the per-step particle loop runs serially.
const PAR_THRESHOLD: usize = 32;

/// Noise level `ε` per step: `initial` for the first `initial_steps` steps,
/// `rest` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub initial: f64,
    pub initial_steps: usize,
    pub rest: f64,
}

impl EpsSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            initial: eps,
            initial_steps: 0,
            rest: eps,
        }
    }

    pub fn first_steps(steps: usize, initial: f64, rest: f64) -> Self {
        Self {
            initial,
            initial_steps: steps,
            rest,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.initial_steps {
            self.initial
        } else {
            self.rest
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        for e in [self.initial, self.rest] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidArgument(format!("{name}: eps must lie in [0, 1], got {e}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Gaussian closure for every grad-log term.
    Enkf,
    /// Diffusion-map estimate of the forward grad-log term, split-step
    /// reverse sweep with projection onto the forward ensemble.
    DmapEnkf,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enkf" => Ok(Self::Enkf),
            "dmap" | "dmap_enkf" => Ok(Self::DmapEnkf),
            _ => Err(Error::Config(format!("unknown backend '{s}' (expected enkf or dmap)"))),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Enkf => "enkf",
            Backend::DmapEnkf => "dmap",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub dt: f64,
    pub ensemble_size: usize,
    pub eps_forward: EpsSchedule,
    pub eps_reverse: EpsSchedule,
    pub inflation: f64,
    pub backend: Backend,
    /// Kernel scale of the diffusion map; defaults to `dt`.
    pub eps_dm: Option<f64>,
    pub seed: u64,
    /// Stride at which raw ensembles are kept and records are emitted.
    pub record_every: usize,
    pub terminal_noise: TerminalNoise,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            ensemble_size: 16,
            eps_forward: EpsSchedule::first_steps(1, 1.0, 0.0),
            eps_reverse: EpsSchedule::constant(0.0),
            inflation: 1e-6,
            backend: Backend::Enkf,
            eps_dm: None,
            seed: 0,
            record_every: 1,
            terminal_noise: TerminalNoise::Iid,
        }
    }
}

/// Uniform time grid covering `[0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

impl SolverConfig {
    pub fn eps_dm(&self) -> f64 {
        self.eps_dm.unwrap_or(self.dt)
    }

    /// Checks the configuration against a problem and builds the grid.
    ///
    /// The number of steps is `round(T / dt)` and the step actually used is
    /// `T / N`, so the last grid point is exactly `T`.
    pub fn grid(&self, p: &ControlProblem) -> Result<TimeGrid> {
        self.validate()?;
        if self.backend == Backend::DmapEnkf {
            let s = p.sigma(p.start());
            if nalgebra::Cholesky::new(s).is_none() {
                return Err(Error::InvalidArgument(
                    "the diffusion-map backend needs full-rank noise covariance".into(),
                ));
            }
        }
        let t = p.horizon();
        let n = (t / self.dt).round() as usize;
        if n == 0 {
            return Err(Error::InvalidArgument(format!("dt = {} exceeds the horizon {t}", self.dt)));
        }
        let dt = t / n as f64;
        let mut times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        times[n] = t;
        Ok(TimeGrid { dt, times })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if self.ensemble_size < 2 {
            return Err(Error::InsufficientEnsemble {
                size: self.ensemble_size,
            });
        }
        if !(self.inflation >= 0.0) {
            return Err(Error::InvalidArgument("inflation must be >= 0".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be positive".into()));
        }
        if let Some(e) = self.eps_dm {
            if !(e > 0.0) {
                return Err(Error::InvalidArgument("eps_dm must be positive".into()));
            }
        }
        self.eps_forward.validate("eps_forward")?;
        self.eps_reverse.validate("eps_reverse")
    }
}

/// Sinkhorn residuals and convex-hull certificates collected while sweeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DmapDiagnostics {
    pub kernels_built: usize,
    pub max_row_residual: f64,
    pub max_col_residual: f64,
    pub max_sinkhorn_iterations: usize,
    pub hull_checks: usize,
    pub min_weight: f64,
    pub max_weight_sum_error: f64,
}

impl DmapDiagnostics {
    fn kernel(&mut self, op: &DiffusionMapOperator) {
        let s = op.sinkhorn_report();
        self.kernels_built += 1;
        self.max_row_residual = self.max_row_residual.max(s.row_residual);
        self.max_col_residual = self.max_col_residual.max(s.col_residual);
        self.max_sinkhorn_iterations = self.max_sinkhorn_iterations.max(s.iterations);
    }

    fn merge(&mut self, other: &DmapDiagnostics) {
        if other.hull_checks > 0 {
            self.min_weight = if self.hull_checks == 0 {
                other.min_weight
            } else {
                self.min_weight.min(other.min_weight)
            };
        }
        self.kernels_built += other.kernels_built;
        self.max_row_residual = self.max_row_residual.max(other.max_row_residual);
        self.max_col_residual = self.max_col_residual.max(other.max_col_residual);
        self.max_sinkhorn_iterations = self.max_sinkhorn_iterations.max(other.max_sinkhorn_iterations);
        self.hull_checks += other.hull_checks;
        self.max_weight_sum_error = self.max_weight_sum_error.max(other.max_weight_sum_error);
    }
}

/// Output of the forward sweep.
#[derive(Clone, Debug)]
pub struct ForwardSweep {
    pub times: Vec<f64>,
    /// `(m̄_n, C̄_n)` at every grid point.
    pub moments: Vec<EmpiricalMoments>,
    /// Forward ensembles at every grid point; kept only by the
    /// diffusion-map backend, which projects onto them in reverse.
    pub ensembles: Option<Vec<Ensemble>>,
    /// `(grid index, ensemble)` at the record stride.
    pub recorded: Vec<(usize, Ensemble)>,
    pub terminal: Ensemble,
    pub diagnostics: DmapDiagnostics,
}

/// Per-step moments and gains of a forward/reverse solve.
#[derive(Clone, Debug)]
pub struct SweepRecord {
    pub times: Vec<f64>,
    pub bar: Vec<EmpiricalMoments>,
    pub tilde: Vec<EmpiricalMoments>,
    pub gains: Vec<GainPair>,
    pub forward_ensembles: Vec<(usize, Ensemble)>,
    pub reverse_ensembles: Vec<(usize, Ensemble)>,
    /// First grid index (walking backwards from `T`) where the reverse
    /// covariance before inflation was not positive definite.
    pub first_singular_tilde: Option<usize>,
    pub diagnostics: DmapDiagnostics,
}

impl SweepRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Grid indices kept when emitting with a stride (always includes the
    /// first and last points).
    pub fn recorded_indices(&self, stride: usize) -> Vec<usize> {
        let n = self.times.len();
        let mut idx: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
        if idx.last() != Some(&(n - 1)) {
            idx.push(n - 1);
        }
        idx
    }

    pub fn schedule(&self) -> Result<AffineControlSchedule> {
        AffineControlSchedule::new(
            self.times.clone(),
            self.gains.iter().map(|g| g.a.clone()).collect(),
            self.gains.iter().map(|g| g.c.clone()).collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub schedule: AffineControlSchedule,
    pub record: SweepRecord,
}

fn blowup(step: usize, t: f64, particle: usize, what: &str) -> Error {
    Error::NumericalBlowup {
        step,
        t,
        particle,
        what: what.to_string(),
    }
}

/// Runs `f` for every particle index, in parallel for large ensembles.
/// Output order is the index order regardless of scheduling.
fn per_particle<F>(m: usize, f: F) -> Result<Vec<DVector<f64>>>
where
    F: Fn(usize) -> Result<DVector<f64>> + Sync + Send,
{
    if m >= PAR_THRESHOLD {
        (0..m).into_par_iter().map(f).collect()
    } else {
        (0..m).map(f).collect()
    }
}

pub(crate) fn initial_ensemble(p: &ControlProblem, size: usize, streams: &Streams) -> Result<Ensemble> {
    match p.initial_cov() {
        None => Ensemble::at_point(p.start(), size, 0.0),
        Some(cov) => {
            let root = sym_sqrt(cov);
            let cols: Vec<_> = (0..size)
                .map(|i| p.start() + &root * streams.normal_vec(Purpose::InitialSpread, 0, i as u64, p.dim_x()))
                .collect();
            Ensemble::from_particles(&cols, 0.0)
        }
    }
}

fn noise_increment(
    p: &ControlProblem,
    x: &DVector<f64>,
    eps: f64,
    dt: f64,
    streams: &Streams,
    purpose: Purpose,
    step: usize,
    particle: usize,
) -> Option<DVector<f64>> {
    if eps > 0.0 {
        let xi = streams.normal_vec(purpose, step as u64, particle as u64, p.dim_b());
        Some(p.noise(x) * xi * (eps * dt).sqrt())
    } else {
        None
    }
}

/// One forward Euler–Maruyama step of every particle. Returns the new
/// particles and, when built, the diffusion-map operator used.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_step(
    p: &ControlProblem,
    ens: &Ensemble,
    bar: &EmpiricalMoments,
    eps: f64,
    dt: f64,
    backend: Backend,
    eps_dm: f64,
    streams: &Streams,
    step: usize,
) -> Result<(DMatrix<f64>, Option<DiffusionMapOperator>)> {
    let (cxh, mh) = stats::cross_moments(ens, |x| p.running_map(x))?;
    let op = if backend == Backend::DmapEnkf && eps < 1.0 {
        Some(DiffusionMapOperator::from_problem(p, ens.particles().clone(), eps_dm)?)
    } else {
        None
    };
    let t = ens.time();
    let cols = per_particle(ens.size(), |i| {
        let x = ens.particle(i);
        let drift = match &op {
            Some(op) => {
                let mut f = p.drift(&x) - enkf::g_bar_kf(p, &x, &cxh, &mh);
                f -= op.grad_log_estimate(&x)? * (0.5 * (1.0 - eps));
                f
            }
            None => enkf::forward_drift(p, &x, bar, &cxh, &mh, eps)?,
        };
        let mut next = &x + drift * dt;
        if let Some(dw) = noise_increment(p, &x, eps, dt, streams, Purpose::ForwardNoise, step, i) {
            next += dw;
        }
        if !all_finite(&next) {
            return Err(blowup(step, t, i, "forward particle is not finite"));
        }
        Ok(next)
    })?;
    Ok((DMatrix::from_columns(&cols), op))
}

/// Integrates the forward McKean–Vlasov SDE from `x₀` over the grid.
pub fn forward_sweep(p: &ControlProblem, cfg: &SolverConfig, streams: &Streams) -> Result<ForwardSweep> {
    let grid = cfg.grid(p)?;
    let n_steps = grid.steps();
    let keep_all = cfg.backend == Backend::DmapEnkf;
    let mut ens = initial_ensemble(p, cfg.ensemble_size, streams)?;
    let mut moments = Vec::with_capacity(n_steps + 1);
    let mut all = keep_all.then(|| Vec::with_capacity(n_steps + 1));
    let mut recorded = Vec::new();
    let mut diagnostics = DmapDiagnostics::default();

    for n in 0..=n_steps {
        let bar = stats::moments(&ens, cfg.inflation)?;
        if n % cfg.record_every == 0 || n == n_steps {
            recorded.push((n, ens.clone()));
        }
        if let Some(all) = all.as_mut() {
            all.push(ens.clone());
        }
        if n == n_steps {
            moments.push(bar);
            break;
        }
        let eps = cfg.eps_forward.at(n);
        let (next, op) = forward_step(p, &ens, &bar, eps, grid.dt, cfg.backend, cfg.eps_dm(), streams, n)?;
        if let Some(op) = &op {
            diagnostics.kernel(op);
        }
        moments.push(bar);
        ens = Ensemble::new(next, grid.times[n + 1])?;
    }

    Ok(ForwardSweep {
        times: grid.times,
        moments,
        ensembles: all,
        recorded,
        terminal: ens,
        diagnostics,
    })
}

fn tilde_moments(
    ens: &Ensemble,
    delta: f64,
    step: usize,
    first_singular: &mut Option<usize>,
) -> Result<EmpiricalMoments> {
    let raw = stats::moments(ens, 0.0)?;
    if !raw.is_invertible() && first_singular.is_none() {
        *first_singular = Some(step);
    }
    let tilde = stats::moments(ens, delta)?;
    if !tilde.is_invertible() {
        return Err(Error::CovarianceCollapse { step, t: ens.time() });
    }
    Ok(tilde)
}

/// One reverse Euler–Maruyama step under the Gaussian closure.
#[allow(clippy::too_many_arguments)]
pub(crate) fn reverse_step_enkf(
    p: &ControlProblem,
    ens: &Ensemble,
    bar: &EmpiricalMoments,
    tilde: &EmpiricalMoments,
    g: &TildeDrift,
    eps: f64,
    dt: f64,
    streams: &Streams,
    step_key: usize,
    grid_index: usize,
) -> Result<DMatrix<f64>> {
    let t = ens.time();
    let cols = per_particle(ens.size(), |i| {
        let x = ens.particle(i);
        let f = enkf::reverse_drift_with(p, &x, bar, tilde, g, eps)?;
        let mut next = &x + f * dt;
        if let Some(dw) = noise_increment(p, &x, eps, dt, streams, Purpose::ReverseNoise, step_key, i) {
            next += dw;
        }
        if !all_finite(&next) {
            return Err(blowup(grid_index, t, i, "reverse particle is not finite"));
        }
        Ok(next)
    })?;
    Ok(DMatrix::from_columns(&cols))
}

fn check_forward(fwd: &ForwardSweep, terminal: &Ensemble) -> Result<usize> {
    let n_steps = fwd.times.len() - 1;
    if fwd.moments.len() != n_steps + 1 {
        return Err(Error::InvalidArgument("forward record is incomplete".into()));
    }
    if terminal.dim() != fwd.moments[0].dim() {
        return Err(Error::InvalidArgument("terminal ensemble dimension mismatch".into()));
    }
    Ok(n_steps)
}

fn finish_gain(
    bar: &EmpiricalMoments,
    tilde: &EmpiricalMoments,
    n: usize,
    t: f64,
    first_singular: Option<usize>,
) -> Result<GainPair> {
    let gain = enkf::gain_from_moments(bar, tilde).map_err(|_| Error::CovarianceCollapse { step: n, t })?;
    if !gain.is_finite() {
        return Err(Error::NumericalBlowup {
            step: n,
            t,
            particle: 0,
            what: match first_singular {
                Some(k) => format!("gain not finite; reverse covariance first singular at step {k}"),
                None => "gain not finite".into(),
            },
        });
    }
    Ok(gain)
}

/// Integrates the reverse SDE from `T` to `0` with the Gaussian closure,
/// reading the frozen forward moments of each step.
pub fn reverse_sweep_enkf(
    p: &ControlProblem,
    cfg: &SolverConfig,
    fwd: &ForwardSweep,
    terminal: &Ensemble,
    streams: &Streams,
) -> Result<SweepRecord> {
    let n_steps = check_forward(fwd, terminal)?;
    let dt = p.horizon() / n_steps as f64;
    let mut tilde_rev = Vec::with_capacity(n_steps + 1);
    let mut gains_rev = Vec::with_capacity(n_steps + 1);
    let mut recorded = Vec::new();
    let mut first_singular = None;
    let mut ens = terminal.clone();

    for n in (0..=n_steps).rev() {
        let bar = &fwd.moments[n];
        let tilde = tilde_moments(&ens, cfg.inflation, n, &mut first_singular)?;
        let gain = finish_gain(bar, &tilde, n, fwd.times[n], first_singular)?;
        if n % cfg.record_every == 0 || n == n_steps {
            recorded.push((n, ens.clone()));
        }
        if n > 0 {
            let k = n_steps - n;
            let g = TildeDrift::new(p, &tilde, &gain, 0.0);
            let next = reverse_step_enkf(p, &ens, bar, &tilde, &g, cfg.eps_reverse.at(k), dt, streams, k, n)?;
            ens = Ensemble::new(next, fwd.times[n - 1])?;
        }
        tilde_rev.push(tilde);
        gains_rev.push(gain);
    }
    tilde_rev.reverse();
    gains_rev.reverse();
    recorded.reverse();

    Ok(SweepRecord {
        times: fwd.times.clone(),
        bar: fwd.moments.clone(),
        tilde: tilde_rev,
        gains: gains_rev,
        forward_ensembles: fwd.recorded.clone(),
        reverse_ensembles: recorded,
        first_singular_tilde: first_singular,
        diagnostics: fwd.diagnostics.clone(),
    })
}

/// Reverse sweep by the split-step scheme: an explicit half step with the
/// drift `−b − g̃` (plus the Gaussian `C̃` group when `ε < 1`) and noise,
/// then projection `X̃ ← 𝒳̄_{n−1} p_{n−1}(X̃)` onto the forward ensemble.
pub fn reverse_sweep_splitstep(
    p: &ControlProblem,
    cfg: &SolverConfig,
    fwd: &ForwardSweep,
    terminal: &Ensemble,
    streams: &Streams,
) -> Result<SweepRecord> {
    let n_steps = check_forward(fwd, terminal)?;
    let anchors = fwd
        .ensembles
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("split-step sweep needs the forward ensembles".into()))?;
    let dt = p.horizon() / n_steps as f64;
    let mut tilde_rev = Vec::with_capacity(n_steps + 1);
    let mut gains_rev = Vec::with_capacity(n_steps + 1);
    let mut recorded = Vec::new();
    let mut first_singular = None;
    let mut diag = DmapDiagnostics {
        min_weight: f64::INFINITY,
        ..Default::default()
    };
    let mut ens = terminal.clone();

    for n in (0..=n_steps).rev() {
        let bar = &fwd.moments[n];
        let tilde = tilde_moments(&ens, cfg.inflation, n, &mut first_singular)?;
        let gain = finish_gain(bar, &tilde, n, fwd.times[n], first_singular)?;
        if n % cfg.record_every == 0 || n == n_steps {
            recorded.push((n, ens.clone()));
        }
        if n > 0 {
            let k = n_steps - n;
            let eps = cfg.eps_reverse.at(k);
            let g = TildeDrift::new(p, &tilde, &gain, 0.0);
            let op = DiffusionMapOperator::from_problem(p, anchors[n - 1].particles().clone(), cfg.eps_dm())?;
            diag.kernel(&op);
            let t = fwd.times[n];
            let step = per_particle(ens.size(), |i| {
                let x = ens.particle(i);
                let mut f = -p.drift(&x) - g.eval(&x);
                if eps < 1.0 {
                    f -= enkf::gaussian_score_group(p, &x, &tilde)? * (0.5 * (1.0 - eps));
                }
                let mut half = &x + f * dt;
                if let Some(dw) = noise_increment(p, &x, eps, dt, streams, Purpose::ReverseNoise, k, i) {
                    half += dw;
                }
                if !all_finite(&half) {
                    return Err(blowup(n, t, i, "reverse half step is not finite"));
                }
                let w = op.weights(&half)?;
                // Pack the certificate next to the projected point.
                let proj = op.anchors() * &w.p;
                let mut out = DVector::zeros(proj.len() + 2);
                out.rows_mut(0, proj.len()).copy_from(&proj);
                out[proj.len()] = w.min;
                out[proj.len() + 1] = w.sum_error;
                Ok(out)
            })?;
            let d = p.dim_x();
            let mut next = DMatrix::zeros(d, ens.size());
            for (i, col) in step.iter().enumerate() {
                let (min, sum_err) = (col[d], col[d + 1]);
                diag.hull_checks += 1;
                diag.min_weight = diag.min_weight.min(min);
                diag.max_weight_sum_error = diag.max_weight_sum_error.max(sum_err);
                if !(min >= 0.0 && sum_err <= 1e-12 * op.anchors().ncols() as f64) {
                    return Err(Error::HullViolation { step: n, particle: i });
                }
                next.set_column(i, &col.rows(0, d));
            }
            ens = Ensemble::new(next, fwd.times[n - 1])?;
        }
        tilde_rev.push(tilde);
        gains_rev.push(gain);
    }
    tilde_rev.reverse();
    gains_rev.reverse();
    recorded.reverse();

    let mut diagnostics = fwd.diagnostics.clone();
    diagnostics.merge(&diag);
    Ok(SweepRecord {
        times: fwd.times.clone(),
        bar: fwd.moments.clone(),
        tilde: tilde_rev,
        gains: gains_rev,
        forward_ensembles: fwd.recorded.clone(),
        reverse_ensembles: recorded,
        first_singular_tilde: first_singular,
        diagnostics,
    })
}

/// Forward sweep, terminal update, and the backend's reverse sweep; the
/// schedule holds the per-step gains.
pub fn solve(p: &ControlProblem, cfg: &SolverConfig) -> Result<Solution> {
    let streams = Streams::new(cfg.seed);
    let fwd = forward_sweep(p, cfg, &streams)?;
    let terminal = enkf::terminal_update(p, &fwd.terminal, cfg.terminal_noise, &streams)?;
    let record = match cfg.backend {
        Backend::Enkf => reverse_sweep_enkf(p, cfg, &fwd, &terminal, &streams)?,
        Backend::DmapEnkf => reverse_sweep_splitstep(p, cfg, &fwd, &terminal, &streams)?,
    };
    Ok(Solution {
        schedule: record.schedule()?,
        record,
    })
}

/// One simulated path of the controlled SDE.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

fn simulate_path(
    p: &ControlProblem,
    sched: &AffineControlSchedule,
    rho: f64,
    streams: &Streams,
    path: usize,
) -> Result<Trajectory> {
    let times = sched.times();
    let mut rng = streams.rng(Purpose::PathNoise, path as u64, 0);
    let mut x = match p.initial_cov() {
        None => p.start().clone(),
        Some(cov) => p.start() + sym_sqrt(cov) * streams.normal_vec(Purpose::InitialSpread, u64::MAX, path as u64, p.dim_x()),
    };
    let mut states = Vec::with_capacity(times.len());
    let mut controls = Vec::with_capacity(times.len());
    for n in 0..times.len() {
        let u = p.feedback(&sched.gains()[n], &sched.shifts()[n], &x);
        states.push(x.clone());
        controls.push(u.clone());
        if n + 1 == times.len() {
            break;
        }
        let dt = times[n + 1] - times[n];
        let mut next = &x + (p.drift(&x) + p.gain(&x) * &u) * dt;
        if rho != 0.0 {
            let xi = DVector::from_fn(p.dim_b(), |_, _| StandardNormal.sample(&mut rng));
            next += p.noise(&x) * xi * (rho * dt.sqrt());
        }
        if !all_finite(&next) {
            return Err(blowup(n, times[n], path, "controlled path is not finite"));
        }
        x = next;
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        controls,
    })
}

fn check_schedule(p: &ControlProblem, sched: &AffineControlSchedule) -> Result<()> {
    if sched.dim() != p.dim_x() {
        return Err(Error::InvalidArgument("schedule dimension does not match d_x".into()));
    }
    let (t0, t1) = (sched.times()[0], *sched.times().last().unwrap());
    if t0 != 0.0 || (t1 - p.horizon()).abs() > 1e-9 * p.horizon() {
        return Err(Error::InvalidArgument(format!(
            "schedule covers [{t0}, {t1}], need [0, {}]",
            p.horizon()
        )));
    }
    Ok(())
}

/// Euler–Maruyama paths of `dX = (b + G u) dt + ρ σ dB` under the schedule.
/// `rho` scales the noise (`Some(0.0)` gives deterministic runs); `None`
/// keeps the model noise.
pub fn simulate_controlled(
    p: &ControlProblem,
    sched: &AffineControlSchedule,
    rho: Option<f64>,
    n_paths: usize,
    streams: &Streams,
) -> Result<Vec<Trajectory>> {
    check_schedule(p, sched)?;
    let rho = rho.unwrap_or(1.0);
    (0..n_paths)
        .into_par_iter()
        .map(|k| simulate_path(p, sched, rho, streams, k))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub per_path: Vec<f64>,
}

/// Cost of one path by the left-endpoint rectangle rule.
pub fn path_cost(p: &ControlProblem, traj: &Trajectory) -> Result<f64> {
    let n = traj.times.len();
    let mut j = 0.0;
    for k in 0..n - 1 {
        let dt = traj.times[k + 1] - traj.times[k];
        j += dt * (p.running_cost(&traj.states[k])? + p.control_cost(&traj.controls[k]));
    }
    Ok(j + p.terminal_cost(&traj.states[n - 1])?)
}

/// Monte-Carlo estimate of `E[∫(c + ½uᵀR⁻¹u) dt + f(X_T)]` and its
/// standard error.
pub fn estimate_cost(
    p: &ControlProblem,
    sched: &AffineControlSchedule,
    rho: Option<f64>,
    n_paths: usize,
    streams: &Streams,
) -> Result<CostEstimate> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    check_schedule(p, sched)?;
    let r = rho.unwrap_or(1.0);
    let per_path: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|k| path_cost(p, &simulate_path(p, sched, r, streams, k)?))
        .collect::<Result<_>>()?;
    let n = per_path.len() as f64;
    let mean = per_path.iter().sum::<f64>() / n;
    let std_error = if per_path.len() > 1 {
        let var = per_path.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(CostEstimate {
        mean,
        std_error,
        per_path,
    })
}

//! Stationary (discounted, infinite-horizon) gain: run the forward sweep to
//! equilibrium, then the discounted reverse sweep against the frozen
//! equilibrium moments until it settles too.

use nalgebra::DVector;

use crate::enkf::{self, GainPair, TildeDrift};
use crate::error::{Error, Result};
use crate::problem::ControlProblem;
use crate::rng::Streams;
use crate::solver::{self, Backend, SolverConfig};
use crate::stats::{self, Ensemble, EmpiricalMoments};

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonConfig {
    /// Discount rate `γ > 0`.
    pub gamma: f64,
    /// Threshold on the relative moment increment per unit time.
    pub equilibrium_tol: f64,
    /// Time budget of each phase.
    pub max_time: f64,
    /// Step size, ensemble size, inflation, noise schedules and seed.
    pub base: SolverConfig,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            equilibrium_tol: 1e-6,
            max_time: 1e3,
            base: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StationarySolution {
    pub gain: GainPair,
    pub bar: EmpiricalMoments,
    pub tilde: EmpiricalMoments,
    pub forward_steps: usize,
    pub reverse_steps: usize,
    pub forward_residual: f64,
    pub reverse_residual: f64,
    /// Reverse moments every `record_every` steps.
    pub reverse_history: Vec<EmpiricalMoments>,
}

/// `½ C̃ {γI + A K} (A x + A m̃ + 2c)`.
pub fn g_tilde_kf_discounted(
    p: &ControlProblem,
    x: &DVector<f64>,
    tilde: &EmpiricalMoments,
    gain: &GainPair,
    gamma: f64,
) -> DVector<f64> {
    TildeDrift::new(p, tilde, gain, gamma).eval(x)
}

fn residual(prev: &EmpiricalMoments, next: &EmpiricalMoments, dt: f64) -> f64 {
    let dm = (next.mean() - prev.mean()).norm();
    let dc = (next.cov() - prev.cov()).amax();
    let scale = 1.0 + next.mean().norm() + next.cov().amax();
    (dm + dc) / (dt * scale)
}

fn validate(cfg: &HorizonConfig) -> Result<()> {
    cfg.base.validate()?;
    if !(cfg.gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("discount must be positive, got {}", cfg.gamma)));
    }
    if !(cfg.equilibrium_tol > 0.0 && cfg.max_time > cfg.base.dt) {
        return Err(Error::InvalidArgument("need equilibrium_tol > 0 and max_time > dt".into()));
    }
    if cfg.base.backend != Backend::Enkf {
        return Err(Error::InvalidArgument("the stationary solver supports the enkf backend only".into()));
    }
    Ok(())
}

/// Runs both phases and returns `(A_eq, c_eq)` with diagnostics. Fails with
/// [`Error::NoEquilibrium`] when a phase exhausts `max_time`.
pub fn stationary_solve(p: &ControlProblem, cfg: &HorizonConfig) -> Result<StationarySolution> {
    validate(cfg)?;
    let base = &cfg.base;
    let dt = base.dt;
    let max_steps = (cfg.max_time / dt).ceil() as usize;
    let streams = Streams::new(base.seed);

    let mut ens = solver::initial_ensemble(p, base.ensemble_size, &streams)?;
    let mut bar = stats::moments(&ens, base.inflation)?;
    let mut forward_steps = 0;
    let mut forward_residual = f64::INFINITY;
    loop {
        if forward_steps >= max_steps {
            return Err(Error::NoEquilibrium {
                phase: "forward",
                max_time: cfg.max_time,
                residual: forward_residual,
            });
        }
        let n = forward_steps;
        let eps = base.eps_forward.at(n);
        let (next, _) = solver::forward_step(p, &ens, &bar, eps, dt, Backend::Enkf, dt, &streams, n)?;
        ens = Ensemble::new(next, (n + 1) as f64 * dt)?;
        let next_bar = stats::moments(&ens, base.inflation)?;
        forward_residual = residual(&bar, &next_bar, dt);
        bar = next_bar;
        forward_steps += 1;
        if forward_steps > base.eps_forward.initial_steps && forward_residual < cfg.equilibrium_tol {
            break;
        }
    }

    let mut rev = ens.clone();
    let mut tilde = stats::moments(&rev, base.inflation)?;
    let mut gain = enkf::gain_from_moments(&bar, &tilde)?;
    let mut history = vec![tilde.clone()];
    let mut reverse_steps = 0;
    let mut reverse_residual = f64::INFINITY;
    loop {
        if reverse_steps >= max_steps {
            return Err(Error::NoEquilibrium {
                phase: "reverse",
                max_time: cfg.max_time,
                residual: reverse_residual,
            });
        }
        let k = reverse_steps;
        let g = TildeDrift::new(p, &tilde, &gain, cfg.gamma);
        let next =
            solver::reverse_step_enkf(p, &rev, &bar, &tilde, &g, base.eps_reverse.at(k), dt, &streams, k, k)?;
        rev = Ensemble::new(next, -((k + 1) as f64) * dt)?;
        let next_tilde = stats::moments(&rev, base.inflation)?;
        if !next_tilde.is_invertible() {
            return Err(Error::CovarianceCollapse {
                step: k + 1,
                t: rev.time(),
            });
        }
        reverse_residual = residual(&tilde, &next_tilde, dt);
        tilde = next_tilde;
        gain = enkf::gain_from_moments(&bar, &tilde)?;
        if !gain.is_finite() {
            return Err(Error::NumericalBlowup {
                step: k + 1,
                t: rev.time(),
                particle: 0,
                what: "stationary gain is not finite".into(),
            });
        }
        reverse_steps += 1;
        if reverse_steps % base.record_every == 0 {
            history.push(tilde.clone());
        }
        if reverse_steps > base.eps_reverse.initial_steps && reverse_residual < cfg.equilibrium_tol {
            break;
        }
    }

    Ok(StationarySolution {
        gain,
        bar,
        tilde,
        forward_steps,
        reverse_steps,
        forward_residual,
        reverse_residual,
        reverse_history: history,
    })
}

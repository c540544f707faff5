//! Named example problems with their default solver settings.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::enkf::TerminalNoise;
use crate::error::{Error, Result};
use crate::problem::ControlProblem;
use crate::solver::{Backend, EpsSchedule, SolverConfig};

pub struct Scenario {
    pub name: &'static str,
    pub summary: &'static str,
    pub problem: fn() -> Result<ControlProblem>,
    pub config: fn() -> SolverConfig,
}

pub const ALL: &[Scenario] = &[
    Scenario {
        name: "pendulum",
        summary: "inverted pendulum swing-up balance, d=2, T=1, EnKF with M=3",
        problem: pendulum,
        config: pendulum_config,
    },
    Scenario {
        name: "langevin",
        summary: "double-well Langevin stabilised at 0, d=1, T=30, diffusion-map backend",
        problem: langevin,
        config: langevin_config,
    },
    Scenario {
        name: "lq",
        summary: "scalar linear-quadratic problem with a = -0.5, T=1",
        problem: lq,
        config: lq_config,
    },
    Scenario {
        name: "ou_diffusion",
        summary: "stationary Ornstein-Uhlenbeck process with zero cost",
        problem: ou_diffusion,
        config: ou_config,
    },
];

pub fn find(name: &str) -> Result<&'static Scenario> {
    ALL.iter().find(|s| s.name == name).ok_or_else(|| {
        let names: Vec<_> = ALL.iter().map(|s| s.name).collect();
        Error::Config(format!("unknown scenario '{name}' (available: {})", names.join(", ")))
    })
}

fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}
fn v1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

/// State `(θ, θ̇)`, `dθ̇ = sin θ dt − cos θ u dt + dB`.
pub fn pendulum() -> Result<ControlProblem> {
    ControlProblem::builder(2)
        .drift(|x| DVector::from_vec(vec![x[1], x[0].sin()]))
        .gain(|x| DMatrix::from_row_slice(2, 1, &[0.0, -x[0].cos()]))
        .constant_noise(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]))
        .running_cost(|x| v1(x[1]), s(0.1))
        .terminal_cost(|x| x.clone(), DMatrix::identity(2, 2) * 1e-3)
        .control_weight(s(10.0))
        .horizon(1.0)
        .start(DVector::from_vec(vec![PI, 0.1]))
        .build()
}

pub fn pendulum_config() -> SolverConfig {
    SolverConfig {
        dt: 1e-4,
        ensemble_size: 3,
        eps_forward: EpsSchedule::first_steps(1, 0.01, 0.0),
        eps_reverse: EpsSchedule::constant(0.0),
        inflation: 1e-4,
        backend: Backend::Enkf,
        eps_dm: None,
        seed: 0,
        record_every: 10,
        terminal_noise: TerminalNoise::Iid,
    }
}

/// `dX = −(X³ − X) dt + u dt + dB`, `c = 50 x²`, `f = x²/2`.
pub fn langevin() -> Result<ControlProblem> {
    ControlProblem::builder(1)
        .drift(|x| x.map(|v| -(v * v * v - v)))
        .constant_gain(s(1.0))
        .constant_noise(s(1.0))
        .running_cost(|x| x.clone(), s(0.01))
        .terminal_cost(|x| x.clone(), s(1.0))
        .control_weight(s(1.0))
        .horizon(30.0)
        .start(v1(1.0))
        .build()
}

pub fn langevin_config() -> SolverConfig {
    SolverConfig {
        dt: 0.01,
        ensemble_size: 8,
        eps_forward: EpsSchedule::first_steps(10, 1.0, 0.0),
        eps_reverse: EpsSchedule::constant(0.0),
        inflation: 1e-4,
        backend: Backend::DmapEnkf,
        eps_dm: Some(0.01),
        seed: 0,
        record_every: 1,
        terminal_noise: TerminalNoise::Iid,
    }
}

pub const LQ_DRIFT: f64 = -0.5;

/// `dX = a X dt + u dt + dB` with unit weights, `h = ξ = x`.
pub fn lq() -> Result<ControlProblem> {
    ControlProblem::builder(1)
        .drift(|x| x * LQ_DRIFT)
        .constant_gain(s(1.0))
        .constant_noise(s(1.0))
        .running_cost(|x| x.clone(), s(1.0))
        .terminal_cost(|x| x.clone(), s(1.0))
        .control_weight(s(1.0))
        .horizon(1.0)
        .start(v1(1.0))
        .build()
}

pub fn lq_config() -> SolverConfig {
    SolverConfig {
        dt: 1e-3,
        ensemble_size: 64,
        eps_forward: EpsSchedule::first_steps(1, 1.0, 0.0),
        eps_reverse: EpsSchedule::constant(0.0),
        inflation: 1e-6,
        backend: Backend::Enkf,
        eps_dm: None,
        seed: 0,
        record_every: 1,
        terminal_noise: TerminalNoise::SecondOrderExact,
    }
}

/// `dX = −X/2 dt + dB` started from `N(0, 1)`, zero cost.
pub fn ou_diffusion() -> Result<ControlProblem> {
    ControlProblem::builder(1)
        .drift(|x| x * -0.5)
        .constant_gain(s(1.0))
        .constant_noise(s(1.0))
        .running_cost(|_| v1(0.0), s(1.0))
        .terminal_cost(|_| v1(0.0), s(1.0))
        .control_weight(s(1.0))
        .horizon(1.0)
        .start(v1(0.0))
        .initial_cov(s(1.0))
        .build()
}

pub fn ou_config() -> SolverConfig {
    SolverConfig {
        dt: 0.01,
        ensemble_size: 256,
        eps_forward: EpsSchedule::constant(0.0),
        eps_reverse: EpsSchedule::constant(0.0),
        inflation: 1e-6,
        backend: Backend::Enkf,
        eps_dm: None,
        seed: 0,
        record_every: 1,
        terminal_noise: TerminalNoise::Iid,
    }
}

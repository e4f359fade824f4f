//! Explicit one-step integrators and reference-trajectory generation.
//!
//! The steppers are generic over [`State`] so the same code advances plain
//! vectors during data generation and tape variables inside recurrent cells.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::projection::{project_robust, SystemManifold, DEFAULT_MAX_ITER};
use crate::systems::{SystemSpec, Trajectory};

/// Vector-space operations an integrator needs.
pub trait State: Clone {
    /// `self + a·dx`
    fn axpy(&self, a: f64, dx: &Self) -> Self;
    fn add(&self, other: &Self) -> Self;
    fn scale(&self, a: f64) -> Self;
    /// Index of the first non-finite component, if any.
    fn first_non_finite(&self) -> Option<usize>;
}

impl State for Vec<f64> {
    fn axpy(&self, a: f64, dx: &Self) -> Self {
        self.iter().zip(dx).map(|(x, d)| x + a * d).collect()
    }
    fn add(&self, other: &Self) -> Self {
        self.iter().zip(other).map(|(x, y)| x + y).collect()
    }
    fn scale(&self, a: f64) -> Self {
        self.iter().map(|x| a * x).collect()
    }
    fn first_non_finite(&self) -> Option<usize> {
        self.iter().position(|v| !v.is_finite())
    }
}

impl State for Var<'_> {
    fn axpy(&self, a: f64, dx: &Self) -> Self {
        *self + dx.scale(a)
    }
    fn add(&self, other: &Self) -> Self {
        *self + *other
    }
    fn scale(&self, a: f64) -> Self {
        Var::scale(*self, a)
    }
    fn first_non_finite(&self) -> Option<usize> {
        self.try_value().ok().and_then(|v| v.first_non_finite())
    }
}

fn checked<S: State>(dx: S, stage: &str) -> Result<S> {
    match dx.first_non_finite() {
        Some(i) => Err(Error::divergence(stage, format!("vector field component {i} is not finite"))),
        None => Ok(dx),
    }
}

/// `x + Δt·f(x, t)`.
pub fn step_euler<S, F>(mut f: F, x: &S, t: f64, dt: f64) -> Result<S>
where
    S: State,
    F: FnMut(&S, f64) -> Result<S>,
{
    let k1 = checked(f(x, t)?, "euler stage")?;
    Ok(x.axpy(dt, &k1))
}

/// Classical four-stage Runge–Kutta.
pub fn step_rk4<S, F>(mut f: F, x: &S, t: f64, dt: f64) -> Result<S>
where
    S: State,
    F: FnMut(&S, f64) -> Result<S>,
{
    let half = 0.5 * dt;
    let k1 = checked(f(x, t)?, "rk4 stage 1")?;
    let k2 = checked(f(&x.axpy(half, &k1), t + half)?, "rk4 stage 2")?;
    let k3 = checked(f(&x.axpy(half, &k2), t + half)?, "rk4 stage 3")?;
    let k4 = checked(f(&x.axpy(dt, &k3), t + dt)?, "rk4 stage 4")?;
    let sum = k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4);
    Ok(x.axpy(dt / 6.0, &sum))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
        }
    }

    /// Order of the global error.
    pub fn order(self) -> u32 {
        match self {
            Integrator::Euler => 1,
            Integrator::Rk4 => 4,
        }
    }

    pub fn step<S, F>(self, f: F, x: &S, t: f64, dt: f64) -> Result<S>
    where
        S: State,
        F: FnMut(&S, f64) -> Result<S>,
    {
        match self {
            Integrator::Euler => step_euler(f, x, t, dt),
            Integrator::Rk4 => step_rk4(f, x, t, dt),
        }
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Integrator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            _ => Err(Error::Parse(format!("unknown integrator {s:?}"))),
        }
    }
}

/// Prefixes the step index onto divergence and projection errors.
pub fn at_step(k: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Divergence { location, detail } => Error::Divergence { location: format!("step {k}, {location}"), detail },
        Error::NonConvergence { iterations, residual } => Error::divergence(
            format!("step {k}, projection"),
            format!("no convergence after {iterations} iterations (residual {residual:e})"),
        ),
        Error::ConstraintQualification(msg) => Error::ConstraintQualification(format!("step {k}: {msg}")),
        Error::Singularity(msg) => Error::Singularity(format!("step {k}: {msg}")),
        Error::Domain(msg) => Error::Domain(format!("step {k}: {msg}")),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceOptions {
    pub integrator: Integrator,
    /// Robust projection after every step.
    pub projected: bool,
    pub tol: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions { integrator: Integrator::Rk4, projected: true, tol: 1e-12 }
    }
}

/// Integrates the full dynamics from `x0` over `K` steps of `dt`, starting
/// at `t = 0`.
pub fn generate_reference(system: &SystemSpec, x0: &[f64], dt: f64, steps: usize, opts: ReferenceOptions) -> Result<Trajectory> {
    generate_reference_from(system, x0, 0.0, dt, steps, opts)
}

/// As [`generate_reference`] with an explicit start time.
pub fn generate_reference_from(
    system: &SystemSpec,
    x0: &[f64],
    t0: f64,
    dt: f64,
    steps: usize,
    opts: ReferenceOptions,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::structural(format!("time step must be positive, got {dt}")));
    }
    if x0.len() != system.state_dim() {
        return Err(Error::structural(format!(
            "{} has state dimension {}, got {}",
            system.name(),
            system.state_dim(),
            x0.len()
        )));
    }
    let times = Trajectory::grid(t0, dt, steps);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    let field = |x: &Vec<f64>, t: f64| system.eval_full(x, t, &system.input(t));
    for k in 0..steps {
        let t = times[k];
        let mut next = opts.integrator.step(field, &states[k], t, dt).map_err(at_step(k))?;
        if opts.projected {
            let manifold = SystemManifold::new(system, times[k + 1]);
            next = project_robust(&manifold, &next, opts.tol, DEFAULT_MAX_ITER).map_err(at_step(k + 1))?.x_star;
        }
        if let Some(i) = next.first_non_finite() {
            return Err(Error::divergence(format!("step {}", k + 1), format!("state component {i} is not finite")));
        }
        states.push(next);
    }
    let inputs = (system.input_dim() > 0).then(|| times.iter().map(|&t| system.input(t)).collect());
    Trajectory::new(times, states, inputs)
}

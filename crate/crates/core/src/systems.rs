//! Benchmark constrained dynamical systems.
//!
//! Every vector field and invariant is written once against [`Real`], so the
//! same formula runs on plain floats, on per-step tape scalars, and on
//! `[batch]` tape columns. The `eval_*` methods are the checked `f64` entry
//! points that raise singularity and domain errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

pub const LV_ALPHA: f64 = 1.5;
pub const LV_BETA: f64 = 1.0;
pub const LV_GAMMA: f64 = 3.0;
pub const LV_DELTA: f64 = 1.0;
/// Smallest population accepted by the checked Lotka–Volterra invariant.
pub const LV_DOMAIN_GUARD: f64 = 1e-8;

pub const RIGID_INERTIA: [f64; 3] = [1.0, 2.0, 3.0];

pub const ARM_LINKS: usize = 3;
pub const ARM_PATH_CENTER: [f64; 2] = [1.5, 0.5];
pub const ARM_PATH_RADIUS: f64 = 0.5;
/// Starting guess refined onto `e(θ) = p(0)` to obtain the arm's initial state.
pub const ARM_INITIAL_GUESS: [f64; 3] = [0.5, -0.5, -0.5];

const TWO_BODY_MIN_RADIUS: f64 = 1e-9;
const ARM_MIN_GRAM_DET: f64 = 1e-12;
/// Smallest singular value of `G` below which the rows are deemed dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Step used when constraint Hessians come from differences of `G`.
pub const HESSIAN_FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    LotkaVolterra,
    MassSpring,
    TwoBody,
    NonlinearSpring,
    RobotArm,
    RigidBody,
}

impl SystemKind {
    pub const ALL: [SystemKind; 6] = [
        SystemKind::LotkaVolterra,
        SystemKind::MassSpring,
        SystemKind::TwoBody,
        SystemKind::NonlinearSpring,
        SystemKind::RobotArm,
        SystemKind::RigidBody,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::LotkaVolterra => "lotka_volterra",
            SystemKind::MassSpring => "mass_spring",
            SystemKind::TwoBody => "two_body",
            SystemKind::NonlinearSpring => "nonlinear_spring",
            SystemKind::RobotArm => "robot_arm",
            SystemKind::RigidBody => "rigid_body",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown system {s:?}")))
    }
}

/// A benchmark system with its invariant offsets calibrated at `x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    kind: SystemKind,
    x0: Vec<f64>,
    offset: Vec<f64>,
}

impl SystemSpec {
    /// The system at its default initial condition.
    pub fn new(kind: SystemKind) -> Self {
        let x0 = match kind {
            SystemKind::LotkaVolterra => vec![1.0, 1.0],
            SystemKind::MassSpring => vec![1.0, 0.0],
            SystemKind::TwoBody => {
                let e: f64 = 0.6;
                vec![1.0 - e, 0.0, 0.0, ((1.0 + e) / (1.0 - e)).sqrt()]
            }
            // (1, 0, 0, 1) is the circular orbit, where ∇E and ∇L coincide.
            SystemKind::NonlinearSpring => vec![1.0, 0.0, 0.0, 0.8],
            SystemKind::RobotArm => arm_initial_state(),
            SystemKind::RigidBody => vec![0.1f64.cos(), 0.0, 0.1f64.sin()],
        };
        SystemSpec::with_initial_state(kind, x0).expect("default initial states are valid")
    }

    /// Recalibrates the invariant offsets so that `g(x0) = 0`. The robot arm
    /// constraint is an exact path condition and keeps a zero offset; its
    /// `x0` must already satisfy it.
    pub fn with_initial_state(kind: SystemKind, x0: Vec<f64>) -> Result<Self> {
        let probe = SystemSpec { kind, offset: vec![0.0; constraint_dim(kind)], x0: Vec::new() };
        if x0.len() != probe.state_dim() {
            return Err(Error::structural(format!(
                "{kind} has state dimension {}, got {}",
                probe.state_dim(),
                x0.len()
            )));
        }
        let raw = probe.eval_constraint(&x0, 0.0)?;
        let offset = match kind {
            SystemKind::RobotArm => {
                let worst = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if worst > 1e-9 {
                    return Err(Error::Domain(format!("robot arm initial state is off the path by {worst:e}")));
                }
                vec![0.0; raw.len()]
            }
            _ => raw,
        };
        Ok(SystemSpec { kind, x0, offset })
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    /// Invariant values at `x0` (E₀, L₀, V₀, C₀).
    pub fn invariant_offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            SystemKind::LotkaVolterra | SystemKind::MassSpring => 2,
            SystemKind::TwoBody | SystemKind::NonlinearSpring => 4,
            SystemKind::RobotArm | SystemKind::RigidBody => 3,
        }
    }

    /// Width of the exogenous input `w(t)`.
    pub fn input_dim(&self) -> usize {
        match self.kind {
            SystemKind::RobotArm => 2,
            _ => 0,
        }
    }

    pub fn constraint_dim(&self) -> usize {
        constraint_dim(self.kind)
    }

    /// Named physical constants.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match self.kind {
            SystemKind::LotkaVolterra => {
                vec![("alpha", LV_ALPHA), ("beta", LV_BETA), ("gamma", LV_GAMMA), ("delta", LV_DELTA)]
            }
            SystemKind::RigidBody => {
                vec![("i1", RIGID_INERTIA[0]), ("i2", RIGID_INERTIA[1]), ("i3", RIGID_INERTIA[2])]
            }
            SystemKind::RobotArm => vec![
                ("links", ARM_LINKS as f64),
                ("center_x", ARM_PATH_CENTER[0]),
                ("center_y", ARM_PATH_CENTER[1]),
                ("radius", ARM_PATH_RADIUS),
            ],
            _ => Vec::new(),
        }
    }

    /// Exogenous input at time `t`: the path velocity `ṗ(t)` for the robot
    /// arm, empty otherwise.
    pub fn input(&self, t: f64) -> Vec<f64> {
        match self.kind {
            SystemKind::RobotArm => arm_path_velocity(t).to_vec(),
            _ => Vec::new(),
        }
    }

    /// `f_phys + f_unk`.
    pub fn f_full<S: Real>(&self, x: &[S], t: S, w: &[S]) -> Vec<S> {
        let phys = self.f_phys(x, t, w);
        let unk = self.f_unk(x, t, w);
        phys.into_iter().zip(unk).map(|(a, b)| a + b).collect()
    }

    /// Known physics prior.
    pub fn f_phys<S: Real>(&self, x: &[S], _t: S, w: &[S]) -> Vec<S> {
        let zero = x[0].lift(0.0);
        match self.kind {
            SystemKind::LotkaVolterra => vec![x[0].scale(LV_ALPHA), x[1].scale(-LV_GAMMA)],
            SystemKind::MassSpring => vec![x[1], zero],
            SystemKind::TwoBody => vec![x[2], x[3], zero, zero],
            SystemKind::NonlinearSpring => vec![x[2], x[3], zero, zero],
            SystemKind::RobotArm => arm_velocity(x, w),
            SystemKind::RigidBody => vec![zero; 3],
        }
    }

    /// Unknown residual the networks learn.
    pub fn f_unk<S: Real>(&self, x: &[S], _t: S, _w: &[S]) -> Vec<S> {
        let zero = x[0].lift(0.0);
        match self.kind {
            SystemKind::LotkaVolterra => {
                let xy = x[0] * x[1];
                vec![xy.scale(-LV_BETA), xy.scale(LV_DELTA)]
            }
            SystemKind::MassSpring => vec![zero, -x[0]],
            SystemKind::TwoBody => {
                let r2 = x[0].square() + x[1].square();
                let inv_r3 = (r2 * r2.sqrt()).recip();
                vec![zero, zero, -(x[0] * inv_r3), -(x[1] * inv_r3)]
            }
            SystemKind::NonlinearSpring => {
                let r2 = x[0].square() + x[1].square();
                vec![zero, zero, -(x[0] * r2), -(x[1] * r2)]
            }
            SystemKind::RobotArm => vec![zero; 3],
            SystemKind::RigidBody => {
                let [i1, i2, i3] = RIGID_INERTIA;
                let omega = [x[0].scale(1.0 / i1), x[1].scale(1.0 / i2), x[2].scale(1.0 / i3)];
                vec![
                    x[1] * omega[2] - x[2] * omega[1],
                    x[2] * omega[0] - x[0] * omega[2],
                    x[0] * omega[1] - x[1] * omega[0],
                ]
            }
        }
    }

    /// Raw invariant values before the offset is subtracted.
    pub fn invariants<S: Real>(&self, x: &[S], t: S) -> Vec<S> {
        match self.kind {
            SystemKind::LotkaVolterra => vec![
                x[0].scale(LV_DELTA) - x[0].ln().scale(LV_GAMMA) + x[1].scale(LV_BETA) - x[1].ln().scale(LV_ALPHA),
            ],
            SystemKind::MassSpring => vec![(x[0].square() + x[1].square()).scale(0.5)],
            SystemKind::TwoBody => vec![x[0] * x[3] - x[1] * x[2]],
            SystemKind::NonlinearSpring => {
                let r2 = x[0].square() + x[1].square();
                let energy = (x[2].square() + x[3].square()).scale(0.5) + r2.square().scale(0.25);
                vec![energy, x[0] * x[3] - x[1] * x[2]]
            }
            SystemKind::RobotArm => {
                let (ex, ey) = arm_end_effector(x);
                let px = t.cos().scale(ARM_PATH_RADIUS).add_scalar(ARM_PATH_CENTER[0]);
                let py = t.sin().scale(ARM_PATH_RADIUS).add_scalar(ARM_PATH_CENTER[1]);
                vec![ex - px, ey - py]
            }
            SystemKind::RigidBody => vec![(x[0].square() + x[1].square() + x[2].square()).scale(0.5)],
        }
    }

    /// `g(x, t)`: invariants minus their calibrated offsets.
    pub fn constraint<S: Real>(&self, x: &[S], t: S) -> Vec<S> {
        self.invariants(x, t).into_iter().zip(&self.offset).map(|(g, &c)| g.add_scalar(-c)).collect()
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::structural(format!(
                "{} has state dimension {}, got {}",
                self.kind,
                self.state_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn check_dynamics_domain(&self, x: &[f64], w: &[f64]) -> Result<()> {
        self.check_state(x)?;
        if w.len() != self.input_dim() {
            return Err(Error::structural(format!(
                "{} takes {} exogenous inputs, got {}",
                self.kind,
                self.input_dim(),
                w.len()
            )));
        }
        match self.kind {
            SystemKind::TwoBody => {
                let r = x[0].hypot(x[1]);
                if r < TWO_BODY_MIN_RADIUS {
                    return Err(Error::Singularity(format!("two-body separation {r:e} is too small")));
                }
            }
            SystemKind::RobotArm => {
                let det = arm_gram_det(x);
                if det.abs() < ARM_MIN_GRAM_DET {
                    return Err(Error::Singularity(format!("arm Jacobian Gram determinant {det:e}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn eval_full(&self, x: &[f64], t: f64, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dynamics_domain(x, w)?;
        Ok(self.f_full(x, t, w))
    }

    pub fn eval_prior(&self, x: &[f64], t: f64, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dynamics_domain(x, w)?;
        Ok(self.f_phys(x, t, w))
    }

    pub fn eval_residual_target(&self, x: &[f64], t: f64, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dynamics_domain(x, w)?;
        Ok(self.f_unk(x, t, w))
    }

    pub fn eval_constraint(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_state(x)?;
        if self.kind == SystemKind::LotkaVolterra && (x[0] < LV_DOMAIN_GUARD || x[1] < LV_DOMAIN_GUARD) {
            return Err(Error::Domain(format!(
                "Lotka-Volterra invariant needs positive populations, got ({}, {})",
                x[0], x[1]
            )));
        }
        Ok(self.constraint(x, t))
    }

    /// Analytic `G = ∂g/∂x` (m × n). No rank check; see
    /// [`SystemSpec::eval_constraint_jacobian`].
    pub fn constraint_jacobian(&self, x: &[f64], _t: f64) -> DMatrix<f64> {
        let n = self.state_dim();
        match self.kind {
            SystemKind::LotkaVolterra => {
                DMatrix::from_row_slice(1, 2, &[LV_DELTA - LV_GAMMA / x[0], LV_BETA - LV_ALPHA / x[1]])
            }
            SystemKind::MassSpring => DMatrix::from_row_slice(1, 2, &[x[0], x[1]]),
            SystemKind::TwoBody => DMatrix::from_row_slice(1, 4, &[x[3], -x[2], -x[1], x[0]]),
            SystemKind::NonlinearSpring => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                DMatrix::from_row_slice(
                    2,
                    4,
                    &[x[0] * r2, x[1] * r2, x[2], x[3], x[3], -x[2], -x[1], x[0]],
                )
            }
            SystemKind::RobotArm => {
                let j = arm_jacobian(x);
                DMatrix::from_fn(2, n, |r, c| j[r][c])
            }
            SystemKind::RigidBody => DMatrix::from_row_slice(1, 3, x),
        }
    }

    /// `G` with the full-row-rank check.
    pub fn eval_constraint_jacobian(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let g = self.constraint_jacobian(x, t);
        check_full_row_rank(&g)?;
        Ok(g)
    }

    /// Second derivatives `∇²gᵢ`, one n × n matrix per constraint. Analytic
    /// where written out; the robot arm falls back to central differences
    /// of `G`.
    pub fn constraint_hessians(&self, x: &[f64], t: f64) -> Vec<DMatrix<f64>> {
        let n = self.state_dim();
        match self.kind {
            SystemKind::LotkaVolterra => {
                vec![DMatrix::from_row_slice(2, 2, &[LV_GAMMA / (x[0] * x[0]), 0.0, 0.0, LV_ALPHA / (x[1] * x[1])])]
            }
            SystemKind::MassSpring | SystemKind::RigidBody => vec![DMatrix::identity(n, n)],
            SystemKind::TwoBody => vec![angular_momentum_hessian()],
            SystemKind::NonlinearSpring => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let mut energy = DMatrix::identity(4, 4);
                energy[(0, 0)] = r2 + 2.0 * x[0] * x[0];
                energy[(1, 1)] = r2 + 2.0 * x[1] * x[1];
                energy[(0, 1)] = 2.0 * x[0] * x[1];
                energy[(1, 0)] = 2.0 * x[0] * x[1];
                vec![energy, angular_momentum_hessian()]
            }
            SystemKind::RobotArm => self.finite_difference_hessians(x, t),
        }
    }

    /// `∇²gᵢ` from central differences of the analytic `G`.
    pub fn finite_difference_hessians(&self, x: &[f64], t: f64) -> Vec<DMatrix<f64>> {
        let (m, n) = (self.constraint_dim(), self.state_dim());
        let mut out = vec![DMatrix::zeros(n, n); m];
        let mut probe = x.to_vec();
        for j in 0..n {
            probe[j] = x[j] + HESSIAN_FD_STEP;
            let plus = self.constraint_jacobian(&probe, t);
            probe[j] = x[j] - HESSIAN_FD_STEP;
            let minus = self.constraint_jacobian(&probe, t);
            probe[j] = x[j];
            for (i, h) in out.iter_mut().enumerate() {
                for k in 0..n {
                    h[(k, j)] = (plus[(i, k)] - minus[(i, k)]) / (2.0 * HESSIAN_FD_STEP);
                }
            }
        }
        // Symmetrize away the difference noise.
        out.into_iter().map(|h| (&h + h.transpose()) * 0.5).collect()
    }
}

fn constraint_dim(kind: SystemKind) -> usize {
    match kind {
        SystemKind::NonlinearSpring | SystemKind::RobotArm => 2,
        _ => 1,
    }
}

/// Hessian of `q₁p₂ − q₂p₁` over `(q₁, q₂, p₁, p₂)`.
fn angular_momentum_hessian() -> DMatrix<f64> {
    let mut h = DMatrix::zeros(4, 4);
    h[(0, 3)] = 1.0;
    h[(3, 0)] = 1.0;
    h[(1, 2)] = -1.0;
    h[(2, 1)] = -1.0;
    h
}

/// Fails with a constraint-qualification error when `G` loses full row rank.
pub fn check_full_row_rank(g: &DMatrix<f64>) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence("constraint Jacobian", "non-finite entry"));
    }
    let sigma = g.clone().svd(false, false).singular_values;
    let smallest = if g.nrows() > g.ncols() { 0.0 } else { sigma.min() };
    if smallest < RANK_TOLERANCE {
        return Err(Error::ConstraintQualification(format!(
            "smallest singular value of G is {smallest:e}"
        )));
    }
    Ok(())
}

pub fn arm_path(t: f64) -> [f64; 2] {
    [ARM_PATH_CENTER[0] + ARM_PATH_RADIUS * t.cos(), ARM_PATH_CENTER[1] + ARM_PATH_RADIUS * t.sin()]
}

pub fn arm_path_velocity(t: f64) -> [f64; 2] {
    [-ARM_PATH_RADIUS * t.sin(), ARM_PATH_RADIUS * t.cos()]
}

fn cumulative_angles<S: Real>(x: &[S]) -> Vec<S> {
    let mut acc = Vec::with_capacity(x.len());
    for (i, &a) in x.iter().enumerate() {
        acc.push(if i == 0 { a } else { acc[i - 1] + a });
    }
    acc
}

fn arm_end_effector<S: Real>(x: &[S]) -> (S, S) {
    let angles = cumulative_angles(x);
    let mut ex = angles[0].cos();
    let mut ey = angles[0].sin();
    for &a in &angles[1..] {
        ex = ex + a.cos();
        ey = ey + a.sin();
    }
    (ex, ey)
}

/// `e'(θ)` as rows `[∂eₓ/∂θ, ∂e_y/∂θ]`; column `j` sums the links from `j` on.
fn arm_jacobian<S: Real>(x: &[S]) -> [Vec<S>; 2] {
    let angles = cumulative_angles(x);
    let sines: Vec<S> = angles.iter().map(|a| a.sin()).collect();
    let cosines: Vec<S> = angles.iter().map(|a| a.cos()).collect();
    let n = x.len();
    let mut row_x = vec![-sines[n - 1]; n];
    let mut row_y = vec![cosines[n - 1]; n];
    for j in (0..n - 1).rev() {
        row_x[j] = row_x[j + 1] - sines[j];
        row_y[j] = row_y[j + 1] + cosines[j];
    }
    [row_x, row_y]
}

fn arm_gram_det(x: &[f64]) -> f64 {
    let [jx, jy] = arm_jacobian(x);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    dot(&jx, &jx) * dot(&jy, &jy) - dot(&jx, &jy).powi(2)
}

/// Minimum-norm joint velocity `e'ᵀ(e'e'ᵀ)⁻¹ w` tracking the path velocity `w`.
fn arm_velocity<S: Real>(x: &[S], w: &[S]) -> Vec<S> {
    let [jx, jy] = arm_jacobian(x);
    let dot = |a: &[S], b: &[S]| {
        let mut acc = a[0] * b[0];
        for i in 1..a.len() {
            acc = acc + a[i] * b[i];
        }
        acc
    };
    let (a, b, c) = (dot(&jx, &jx), dot(&jx, &jy), dot(&jy, &jy));
    let inv_det = (a * c - b * b).recip();
    let mu_x = (c * w[0] - b * w[1]) * inv_det;
    let mu_y = (a * w[1] - b * w[0]) * inv_det;
    jx.iter().zip(&jy).map(|(&gx, &gy)| gx * mu_x + gy * mu_y).collect()
}

/// Refines [`ARM_INITIAL_GUESS`] onto `e(θ) = p(0)` with minimum-norm Newton
/// steps.
fn arm_initial_state() -> Vec<f64> {
    let target = arm_path(0.0);
    let mut theta = ARM_INITIAL_GUESS.to_vec();
    for _ in 0..100 {
        let (ex, ey) = arm_end_effector(&theta);
        let r = [ex - target[0], ey - target[1]];
        if r[0].abs().max(r[1].abs()) < 1e-15 {
            break;
        }
        let step = arm_velocity(&theta, &r);
        for (t, s) in theta.iter_mut().zip(step) {
            *t -= s;
        }
    }
    theta
}

/// States on a uniform time grid, with optional exogenous inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    /// Grid `t0 + k·dt` for `k = 0..=K`.
    pub fn grid(t0: f64, dt: f64, steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| t0 + k as f64 * dt).collect()
    }

    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>, inputs: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let traj = Trajectory { times, states, inputs };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.states.len() {
            return Err(Error::structural(format!(
                "{} times for {} states",
                self.times.len(),
                self.states.len()
            )));
        }
        let n = self.states[0].len();
        if self.states.iter().any(|s| s.len() != n) {
            return Err(Error::structural("ragged state rows"));
        }
        if let Some(inputs) = &self.inputs {
            if inputs.len() != self.states.len() {
                return Err(Error::structural("input series length differs from state series"));
            }
            let d = inputs[0].len();
            if inputs.iter().any(|w| w.len() != d) {
                return Err(Error::structural("ragged input rows"));
            }
        }
        if self.times.len() > 1 {
            let dt = self.times[1] - self.times[0];
            if dt <= 0.0 {
                return Err(Error::structural("times must increase"));
            }
            for w in self.times.windows(2) {
                if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
                    return Err(Error::structural("time grid is not uniform"));
                }
            }
        }
        let rows = self.states.iter().chain(self.inputs.iter().flatten());
        for (k, row) in rows.enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::divergence(format!("trajectory row {}", k % self.states.len()), "non-finite entry"));
            }
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::divergence("trajectory times", "non-finite entry"));
        }
        Ok(())
    }

    /// Number of samples (K + 1).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    /// Samples `range` as a new trajectory.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            times: self.times[range.clone()].to_vec(),
            states: self.states[range.clone()].to_vec(),
            inputs: self.inputs.as_ref().map(|w| w[range].to_vec()),
        }
    }

    /// CSV with header `t,x0,..,x{n-1}[,w0,..]`, floats to 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.state_dim();
        let d = self.inputs.as_ref().and_then(|w| w.first()).map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..d).map(|i| format!("w{i}")));
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.len() {
            let mut row = vec![format!("{:.16e}", self.times[k])];
            row.extend(self.states[k].iter().map(|v| format!("{v:.16e}")));
            if let Some(inputs) = &self.inputs {
                row.extend(inputs[k].iter().map(|v| format!("{v:.16e}")));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::Parse("empty trajectory CSV".into()))?.split(',').collect();
        if header.first() != Some(&"t") {
            return Err(Error::Parse("trajectory CSV must start with a t column".into()));
        }
        let n = header.iter().filter(|h| h.starts_with('x')).count();
        let d = header.iter().filter(|h| h.starts_with('w')).count();
        if 1 + n + d != header.len() {
            return Err(Error::Parse(format!("unrecognized trajectory header {header:?}")));
        }
        let (mut times, mut states, mut inputs) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Parse(format!("line {}: bad float {v:?}", i + 2))))
                .collect::<Result<_>>()?;
            if vals.len() != header.len() {
                return Err(Error::Parse(format!("line {}: expected {} fields", i + 2, header.len())));
            }
            times.push(vals[0]);
            states.push(vals[1..=n].to_vec());
            inputs.push(vals[1 + n..].to_vec());
        }
        Trajectory::new(times, states, (d > 0).then_some(inputs))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Trajectory::from_csv(&std::fs::read_to_string(path)?)
    }
}

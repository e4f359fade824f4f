//! The model zoo: NODE, PNODE, HRPINN, PHRPINN and the PINN baseline.
//!
//! Every recurrent kind shares one cell, `h_{k+1} = Φ_Δt(h_k; f)`, where
//! `f` is the learned field alone (NODE, PNODE) or the physics prior plus the
//! learned residual (HRPINN, PHRPINN), optionally followed by a projection
//! onto the constraint manifold (PNODE, PHRPINN). The PINN is a network of
//! time fitted with data, differential and algebraic residual terms.
//!
//! # Checkpoint format (version 1)
//!
//! ```text
//! model-checkpoint 1
//! system <name>
//! dt <float>
//! horizon <steps>
//! config <line count>
//! <TOML model config>
//! networks <count>
//! <MLP checkpoints, each terminated by its own `end` line>
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::integrate::{at_step, Integrator};
use crate::nn::{param_count_for, width_for_target, BoundMlp, Mlp};
use crate::projection::{
    ProjectionMode, ProjectionOp, ProjectionResult, SystemManifold, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::systems::{SystemSpec, Trajectory};

/// Parameter budget used when a config gives neither a width nor a target.
pub const DEFAULT_PARAM_TARGET: usize = 500;
pub const DEFAULT_HIDDEN_LAYERS: usize = 2;
/// Soft-constraint weight applied to HRPINN when the config leaves it unset.
pub const DEFAULT_SOFT_WEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Node,
    Pnode,
    Hrpinn,
    Phrpinn,
    Pinn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::Node, ModelKind::Pnode, ModelKind::Hrpinn, ModelKind::Phrpinn, ModelKind::Pinn];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Node => "NODE",
            ModelKind::Pnode => "PNODE",
            ModelKind::Hrpinn => "HRPINN",
            ModelKind::Phrpinn => "PHRPINN",
            ModelKind::Pinn => "PINN",
        }
    }

    pub fn is_projected(self) -> bool {
        matches!(self, ModelKind::Pnode | ModelKind::Phrpinn)
    }

    /// Whether the known physics enters the model.
    pub fn uses_prior(self) -> bool {
        matches!(self, ModelKind::Hrpinn | ModelKind::Phrpinn | ModelKind::Pinn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSetting {
    None,
    Fast,
    Robust,
}

impl ProjectionSetting {
    pub fn mode(self) -> Option<ProjectionMode> {
        match self {
            ProjectionSetting::None => None,
            ProjectionSetting::Fast => Some(ProjectionMode::Fast),
            ProjectionSetting::Robust => Some(ProjectionMode::Robust),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProjectionSetting::None => "none",
            ProjectionSetting::Fast => "fast",
            ProjectionSetting::Robust => "robust",
        }
    }
}

/// What stands in for `f_phys` in the prior-using kinds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    Physics,
    /// `f_phys ≡ 0`, for ablations.
    Zero,
}

fn default_hidden_layers() -> usize {
    DEFAULT_HIDDEN_LAYERS
}
fn one() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Report label; defaults to the kind's label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Defaults to `robust` for projected kinds and `none` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<ProjectionSetting>,
    /// `λ_c`; defaults to 1 for HRPINN and 0 for the other recurrent kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_weight: Option<f64>,
    /// Defaults to the integrator that generated the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<Integrator>,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    /// Fixed hidden width; overrides `param_target`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_target: Option<usize>,
    #[serde(default = "one")]
    pub lambda_diff: f64,
    #[serde(default = "one")]
    pub lambda_alg: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub prior: PriorMode,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            name: None,
            projection: None,
            soft_weight: None,
            integrator: None,
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            width: None,
            param_target: None,
            lambda_diff: 1.0,
            lambda_alg: 1.0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            prior: PriorMode::Physics,
        }
    }

    pub fn with_projection(mut self, setting: ProjectionSetting) -> Self {
        self.projection = Some(setting);
        self
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = Some(integrator);
        self
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = Some(width);
        self
    }

    pub fn with_soft_weight(mut self, weight: f64) -> Self {
        self.soft_weight = Some(weight);
        self
    }

    pub fn with_prior(mut self, prior: PriorMode) -> Self {
        self.prior = prior;
        self
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_string())
    }

    pub fn projection_setting(&self) -> ProjectionSetting {
        self.projection.unwrap_or(if self.kind.is_projected() {
            ProjectionSetting::Robust
        } else {
            ProjectionSetting::None
        })
    }

    pub fn projection_mode(&self) -> Option<ProjectionMode> {
        self.projection_setting().mode()
    }

    pub fn soft_weight(&self) -> f64 {
        match (self.soft_weight, self.kind) {
            (Some(w), _) => w,
            (None, ModelKind::Hrpinn) => DEFAULT_SOFT_WEIGHT,
            (None, _) => 0.0,
        }
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator.unwrap_or_default()
    }

    /// Every problem with this config, or an empty list.
    pub fn validate(&self) -> Vec<String> {
        let mut faults = Vec::new();
        let label = self.label();
        let setting = self.projection_setting();
        if self.kind.is_projected() && setting == ProjectionSetting::None {
            faults.push(format!("{label}: projected kinds need projection = \"fast\" or \"robust\""));
        }
        if !self.kind.is_projected() && setting != ProjectionSetting::None {
            faults.push(format!("{label}: only PNODE and PHRPINN take a projection"));
        }
        if let Some(w) = self.soft_weight {
            if !(w >= 0.0 && w.is_finite()) {
                faults.push(format!("{label}: soft_weight must be a finite non-negative number, got {w}"));
            }
        }
        for (name, v) in [("lambda_diff", self.lambda_diff), ("lambda_alg", self.lambda_alg)] {
            if !(v >= 0.0 && v.is_finite()) {
                faults.push(format!("{label}: {name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            faults.push(format!("{label}: tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            faults.push(format!("{label}: max_iter must be at least 1"));
        }
        if self.hidden_layers == 0 {
            faults.push(format!("{label}: hidden_layers must be at least 1"));
        }
        if self.width == Some(0) {
            faults.push(format!("{label}: width must be at least 1"));
        }
        if self.param_target == Some(0) {
            faults.push(format!("{label}: param_target must be at least 1"));
        }
        faults
    }

    /// Layer sizes of every network the model owns, in parameter order.
    pub fn layer_sizes(&self, system: &SystemSpec) -> Result<Vec<Vec<usize>>> {
        let n = system.state_dim();
        let input = n + system.input_dim();
        let target = self.param_target.unwrap_or(DEFAULT_PARAM_TARGET);
        let sizes = |inp: usize, out: usize, target: usize| -> Result<Vec<usize>> {
            let w = match self.width {
                Some(w) => w,
                None => width_for_target(inp, out, self.hidden_layers, target)?,
            };
            let mut s = vec![inp];
            s.extend(std::iter::repeat_n(w, self.hidden_layers));
            s.push(out);
            Ok(s)
        };
        match self.kind {
            ModelKind::Pinn => Ok(vec![sizes(1, n, target / 2)?, sizes(input, n, target - target / 2)?]),
            _ => Ok(vec![sizes(input, n, target)?]),
        }
    }
}

/// Per-network seed derived from the run seed.
pub fn net_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The learned part of a vector field.
pub enum Residual<'t> {
    Network(BoundMlp<'t>),
    Zero,
    /// The true residual `f_unk` plus a constant offset.
    Oracle(Vec<f64>),
}

impl<'t> Residual<'t> {
    /// Evaluates on a single `[n]` state.
    fn eval_step(&self, tape: &'t Tape, system: &SystemSpec, x: Var<'t>, t: f64, w: &[f64]) -> Result<Var<'t>> {
        let n = system.state_dim();
        match self {
            Residual::Network(net) => {
                let input = if w.is_empty() { x } else { tape.concat(&[x, tape.constant(Tensor::vector(w.to_vec()))]) };
                net.forward(input)
            }
            Residual::Zero => Ok(tape.constant(Tensor::zeros(&[n]))),
            Residual::Oracle(offset) => {
                let comps = x.components();
                let wv: Vec<Var<'t>> = w.iter().map(|&v| tape.scalar(v)).collect();
                let f = system.f_unk(&comps, tape.scalar(t), &wv);
                Ok(tape.concat(&f) + tape.constant(Tensor::vector(offset.clone())))
            }
        }
    }

    /// Evaluates on `[rows]` state columns; returns a `[rows, n]` matrix.
    fn eval_batch(&self, tape: &'t Tape, system: &SystemSpec, cols: &[Var<'t>], t: Var<'t>, w: &[Var<'t>]) -> Result<Var<'t>> {
        let rows = cols[0].len();
        match self {
            Residual::Network(net) => {
                let all: Vec<Var<'t>> = cols.iter().chain(w).copied().collect();
                net.forward(tape.stack_columns(&all))
            }
            Residual::Zero => Ok(tape.constant(Tensor::zeros(&[rows, cols.len()]))),
            Residual::Oracle(offset) => {
                let f = system.f_unk(cols, t, w);
                let shifted: Vec<Var<'t>> = f.into_iter().zip(offset).map(|(v, &c)| v.add_scalar(c)).collect();
                Ok(tape.stack_columns(&shifted))
            }
        }
    }
}

/// The recurrent cell shared by NODE, PNODE, HRPINN and PHRPINN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    /// `None` for the black-box kinds.
    pub prior: Option<PriorMode>,
    pub integrator: Integrator,
    pub projection: Option<ProjectionMode>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Cell {
    pub fn from_config(config: &ModelConfig) -> Self {
        Cell {
            prior: config.kind.uses_prior().then_some(config.prior),
            integrator: config.integrator(),
            projection: config.projection_mode(),
            tol: config.tol,
            max_iter: config.max_iter,
        }
    }

    fn field<'t>(&self, tape: &'t Tape, system: &SystemSpec, residual: &Residual<'t>, x: Var<'t>, t: f64) -> Result<Var<'t>> {
        let w = system.input(t);
        let learned = residual.eval_step(tape, system, x, t, &w)?;
        Ok(match self.prior {
            None => learned,
            Some(PriorMode::Zero) => tape.constant(Tensor::zeros(&[system.state_dim()])) + learned,
            Some(PriorMode::Physics) => {
                let comps = x.components();
                let wv: Vec<Var<'t>> = w.iter().map(|&v| tape.scalar(v)).collect();
                tape.concat(&system.f_phys(&comps, tape.scalar(t), &wv)) + learned
            }
        })
    }
}

/// Hidden states recorded on a tape.
pub struct TapeRollout<'t> {
    /// `h_0 ..= h_K`, each `[n]`.
    pub states: Vec<Var<'t>>,
    pub projections: Vec<ProjectionResult>,
}

/// Unrolls the cell from `x0` for `steps` steps starting at `t0`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_on_tape<'t>(
    tape: &'t Tape,
    cell: &Cell,
    system: &SystemSpec,
    residual: &Residual<'t>,
    x0: &[f64],
    t0: f64,
    dt: f64,
    steps: usize,
) -> Result<TapeRollout<'t>> {
    if x0.len() != system.state_dim() {
        return Err(Error::structural(format!(
            "{} has state dimension {}, got an initial state of length {}",
            system.name(),
            system.state_dim(),
            x0.len()
        )));
    }
    let times = Trajectory::grid(t0, dt, steps);
    let mut h = tape.constant(Tensor::vector(x0.to_vec()));
    let mut states = Vec::with_capacity(steps + 1);
    let mut projections = Vec::new();
    states.push(h);
    for k in 0..steps {
        let field = |x: &Var<'t>, t: f64| cell.field(tape, system, residual, *x, t);
        let mut next = cell.integrator.step(field, &h, times[k], dt).map_err(at_step(k))?;
        if let Some(mode) = cell.projection {
            let manifold = Arc::new(SystemManifold::new(system, times[k + 1]));
            let (projected, result) = ProjectionOp::new(manifold, mode, cell.tol, cell.max_iter)
                .apply(tape, next)
                .map_err(at_step(k + 1))?;
            next = projected;
            projections.push(result);
        }
        let value = next.try_value()?;
        if let Some(i) = value.first_non_finite() {
            return Err(Error::divergence(format!("step {}", k + 1), format!("hidden state component {i} is not finite")));
        }
        states.push(next);
        h = next;
    }
    Ok(TapeRollout { states, projections })
}

/// `λ_c · mean_k ‖g(h_k)‖²` over the given states.
pub fn soft_constraint_penalty<'t>(tape: &'t Tape, system: &SystemSpec, states: &[Var<'t>], times: &[f64], weight: f64) -> Var<'t> {
    if weight == 0.0 || states.is_empty() {
        return tape.scalar(0.0);
    }
    let mut residuals = Vec::new();
    for (h, &t) in states.iter().zip(times) {
        residuals.extend(system.constraint(&h.components(), tape.scalar(t)));
    }
    tape.concat(&residuals).square().sum().scale(weight / states.len() as f64)
}

/// `λ_c · mean_k ‖g_k‖²` for precomputed constraint values.
pub fn soft_penalty_value(g_rows: &[Vec<f64>], weight: f64) -> f64 {
    if g_rows.is_empty() {
        return 0.0;
    }
    weight * g_rows.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / g_rows.len() as f64
}

/// The three terms of the PINN objective.
pub struct PinnTerms<'t> {
    pub data: Var<'t>,
    pub diff: Var<'t>,
    pub alg: Var<'t>,
}

impl<'t> PinnTerms<'t> {
    pub fn total(&self, lambda_diff: f64, lambda_alg: f64) -> Var<'t> {
        self.data + self.diff.scale(lambda_diff) + self.alg.scale(lambda_alg)
    }
}

/// PINN loss terms from a batch of predicted states `x̂` and time
/// derivatives `dx̂/dt` (both `[rows, n]`) at `times`:
///
/// * data: mean squared error against `observations` (zero if absent),
/// * diff: mean over rows of `‖dx̂/dt − f_phys(x̂) − f̂(x̂)‖²`,
/// * alg: mean over rows of `‖g(x̂, t)‖²`.
pub fn pinn_loss_terms<'t>(
    tape: &'t Tape,
    system: &SystemSpec,
    prior: PriorMode,
    residual: &Residual<'t>,
    x_hat: Var<'t>,
    dx_hat: Var<'t>,
    times: &[f64],
    observations: Option<&[Vec<f64>]>,
) -> Result<PinnTerms<'t>> {
    let rows = times.len();
    let n = system.state_dim();
    if x_hat.shape() != [rows, n] || dx_hat.shape() != [rows, n] {
        return Err(Error::structural(format!(
            "PINN batch must be [{rows}, {n}], got {:?} and {:?}",
            x_hat.shape(),
            dx_hat.shape()
        )));
    }
    let scale = 1.0 / rows as f64;
    let t_col = tape.constant(Tensor::vector(times.to_vec()));
    let inputs: Vec<Vec<f64>> = times.iter().map(|&t| system.input(t)).collect();
    let w_cols: Vec<Var<'t>> = (0..system.input_dim())
        .map(|j| tape.constant(Tensor::vector(inputs.iter().map(|w| w[j]).collect())))
        .collect();
    let cols = x_hat.columns();

    let data = match observations {
        Some(obs) => {
            if obs.len() != rows || obs.iter().any(|o| o.len() != n) {
                return Err(Error::structural("PINN observations do not match the batch"));
            }
            let y = Tensor::matrix(rows, n, obs.iter().flatten().copied().collect())?;
            (x_hat - tape.constant(y)).square().mean()
        }
        None => tape.scalar(0.0),
    };

    let learned = residual.eval_batch(tape, system, &cols, t_col, &w_cols)?;
    let mut field = learned;
    if prior == PriorMode::Physics {
        field = tape.stack_columns(&system.f_phys(&cols, t_col, &w_cols)) + field;
    }
    let diff = (dx_hat - field).square().sum().scale(scale);

    let g = system.constraint(&cols, t_col);
    let alg = tape.stack_columns(&g).square().sum().scale(scale);
    Ok(PinnTerms { data, diff, alg })
}

/// The PINN trajectory network evaluated at plain times; inputs are mapped to
/// `τ = 2t/T − 1` for the training horizon `T`.
pub fn pinn_trajectory(net: &Mlp, horizon_time: f64, t: f64) -> Result<Vec<f64>> {
    net.forward(&[pinn_input(horizon_time, t)])
}

fn pinn_input(horizon_time: f64, t: f64) -> f64 {
    2.0 * t / horizon_time - 1.0
}

/// States predicted by a model, with per-step diagnostics.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub trajectory: Trajectory,
    /// `‖g(h_k)‖∞` per sample.
    pub violations: Vec<f64>,
    /// One diagnostics line per projection call.
    pub diagnostics: Vec<String>,
}

/// A model instance: config, system and network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub system: SystemSpec,
    pub dt: f64,
    /// Training horizon in steps; sets the PINN time scaling.
    pub horizon: usize,
    pub nets: Vec<Mlp>,
}

impl Model {
    pub fn init(config: ModelConfig, system: SystemSpec, dt: f64, horizon: usize, seed: u64) -> Result<Self> {
        let faults = config.validate();
        if !faults.is_empty() {
            return Err(Error::Config(faults));
        }
        if !(dt > 0.0) || horizon == 0 {
            return Err(Error::structural(format!("model needs dt > 0 and horizon ≥ 1, got {dt}, {horizon}")));
        }
        let mut nets = config
            .layer_sizes(&system)?
            .iter()
            .enumerate()
            .map(|(i, sizes)| Mlp::init(sizes, net_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        if config.kind == ModelKind::Pinn {
            // Start the trajectory network at the constant initial state
            // rather than at the origin, which can be a singular configuration.
            let bias = nets[0].params_mut().pop().expect("network has an output bias");
            bias.data_mut().copy_from_slice(system.initial_state());
        }
        Ok(Model { config, system, dt, horizon, nets })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| param_count_for(n.layer_sizes())).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.nets.iter().flat_map(Mlp::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets.iter_mut().flat_map(Mlp::params_mut).collect()
    }

    fn horizon_time(&self) -> f64 {
        self.dt * self.horizon as f64
    }

    pub fn cell(&self) -> Cell {
        Cell::from_config(&self.config)
    }

    /// Validates `data` and returns how many model steps separate its samples.
    fn check_data(&self, data: &Trajectory) -> Result<usize> {
        if data.state_dim() != self.system.state_dim() {
            return Err(Error::structural(format!(
                "data has state dimension {}, model expects {}",
                data.state_dim(),
                self.system.state_dim()
            )));
        }
        if data.len() < 2 {
            return Err(Error::structural("training data needs at least two samples"));
        }
        let ratio = data.dt() / self.dt;
        let stride = ratio.round();
        if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
            return Err(Error::structural(format!(
                "data step {} is not a whole multiple of model step {}",
                data.dt(),
                self.dt
            )));
        }
        Ok(stride as usize)
    }

    /// Records the training loss on `tape` and returns it with the
    /// parameter leaves in [`Model::params`] order.
    pub fn loss_on_tape<'t>(&self, tape: &'t Tape, data: &Trajectory) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let stride = self.check_data(data)?;
        let bound: Vec<BoundMlp<'t>> = self.nets.iter().map(|n| n.bind(tape)).collect();
        let leaves: Vec<Var<'t>> = bound.iter().flat_map(BoundMlp::params).collect();
        let loss = match self.kind() {
            ModelKind::Pinn => {
                let rows = data.len();
                let scale = 2.0 / self.horizon_time();
                let tau: Vec<f64> = data.times.iter().map(|&t| pinn_input(self.horizon_time(), t)).collect();
                let t_in = tape.constant(Tensor::matrix(rows, 1, tau)?);
                let (x_hat, dx_dtau) = bound[0].forward_with_input_derivative(t_in)?;
                let residual = Residual::Network(bound[1].clone());
                let terms = pinn_loss_terms(
                    tape,
                    &self.system,
                    self.config.prior,
                    &residual,
                    x_hat,
                    dx_dtau.scale(scale),
                    &data.times,
                    Some(&data.states),
                )?;
                terms.total(self.config.lambda_diff, self.config.lambda_alg)
            }
            _ => {
                let residual = Residual::Network(bound[0].clone());
                let steps = (data.len() - 1) * stride;
                let roll = rollout_on_tape(tape, &self.cell(), &self.system, &residual, &data.states[0], data.times[0], self.dt, steps)?;
                // Sparse data: only every `stride`-th rollout state is observed.
                let seen: Vec<Var<'t>> = roll.states.iter().step_by(stride).skip(1).copied().collect();
                let predicted = tape.concat(&seen);
                let observed = tape.constant(Tensor::vector(data.states[1..].iter().flatten().copied().collect()));
                let mut loss = (predicted - observed).square().mean();
                let weight = self.config.soft_weight();
                if weight > 0.0 {
                    loss = loss + soft_constraint_penalty(tape, &self.system, &seen, &data.times[1..], weight);
                }
                loss
            }
        };
        Ok((loss, leaves))
    }

    pub fn loss(&self, data: &Trajectory) -> Result<f64> {
        let tape = Tape::new();
        let (loss, _) = self.loss_on_tape(&tape, data)?;
        Ok(loss.try_value()?.item())
    }

    /// Loss and its gradient for every parameter tensor.
    pub fn loss_and_grads(&self, data: &Trajectory) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let (loss, leaves) = self.loss_on_tape(&tape, data)?;
        let value = loss.try_value()?.item();
        if !value.is_finite() {
            let location = tape.first_non_finite().map_or("loss".to_string(), |(id, op)| format!("node {id} ({op})"));
            return Err(Error::divergence(location, format!("loss is {value}")));
        }
        let grads = tape.backward(loss, Tensor::scalar(1.0))?;
        Ok((value, leaves.iter().map(|&l| grads.wrt(l)).collect()))
    }

    /// Predicts `steps + 1` samples on the grid `t0 + k·dt`. Recurrent kinds
    /// unroll from `x0`; the PINN evaluates its trajectory network.
    pub fn predict(&self, x0: &[f64], t0: f64, steps: usize) -> Result<Prediction> {
        let times = Trajectory::grid(t0, self.dt, steps);
        let (states, diagnostics) = match self.kind() {
            ModelKind::Pinn => {
                let states = times
                    .iter()
                    .map(|&t| pinn_trajectory(&self.nets[0], self.horizon_time(), t))
                    .collect::<Result<Vec<_>>>()?;
                (states, Vec::new())
            }
            _ => {
                let tape = Tape::new();
                let residual = Residual::Network(self.nets[0].bind(&tape));
                let roll = rollout_on_tape(&tape, &self.cell(), &self.system, &residual, x0, t0, self.dt, steps)?;
                let states = roll.states.iter().map(|s| s.value().into_data()).collect();
                let lines = roll.projections.iter().enumerate().map(|(k, r)| r.diagnostics_line(k + 1)).collect();
                (states, lines)
            }
        };
        let violations = violations(&self.system, &states, &times);
        let inputs = (self.system.input_dim() > 0).then(|| times.iter().map(|&t| self.system.input(t)).collect());
        let trajectory = Trajectory { times, states, inputs };
        trajectory.validate()?;
        Ok(Prediction { trajectory, violations, diagnostics })
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let config = toml::to_string(&self.config).map_err(|e| Error::Parse(e.to_string()))?;
        let mut out = format!(
            "model-checkpoint 1\nsystem {}\ndt {:.16e}\nhorizon {}\nconfig {}\n",
            self.system.name(),
            self.dt,
            self.horizon,
            config.lines().count()
        );
        out.push_str(&config);
        if !config.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(&format!("networks {}\n", self.nets.len()));
        for net in &self.nets {
            out.push_str(&net.to_checkpoint());
        }
        Ok(out)
    }

    /// Restores a model; the system starts from its default initial state.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let field = |i: usize, key: &str| -> Result<&str> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .map(str::trim)
                .ok_or_else(|| Error::Parse(format!("model checkpoint line {}: expected {key:?}", i + 1)))
        };
        if field(0, "model-checkpoint")? != "1" {
            return Err(Error::Parse("unsupported model checkpoint version".into()));
        }
        let system = SystemSpec::new(field(1, "system ")?.parse()?);
        let dt: f64 = field(2, "dt ")?.parse().map_err(|_| Error::Parse("bad dt".into()))?;
        let horizon: usize = field(3, "horizon ")?.parse().map_err(|_| Error::Parse("bad horizon".into()))?;
        let config_lines: usize = field(4, "config ")?.parse().map_err(|_| Error::Parse("bad config length".into()))?;
        let config_end = 5 + config_lines;
        if lines.len() < config_end + 1 {
            return Err(Error::Parse("model checkpoint truncated".into()));
        }
        let config: ModelConfig = toml::from_str(&lines[5..config_end].join("\n")).map_err(|e| Error::Parse(e.to_string()))?;
        let count: usize = field(config_end, "networks ")?.parse().map_err(|_| Error::Parse("bad network count".into()))?;
        let mut nets = Vec::with_capacity(count);
        let mut start = config_end + 1;
        for _ in 0..count {
            let len = lines[start..]
                .iter()
                .position(|l| l.trim() == "end")
                .ok_or_else(|| Error::Parse("network checkpoint missing end marker".into()))?;
            let mut chunk = lines[start..=start + len].join("\n");
            chunk.push('\n');
            nets.push(Mlp::from_checkpoint(&chunk)?);
            start += len + 1;
        }
        let expected = config.layer_sizes(&system)?;
        let got: Vec<Vec<usize>> = nets.iter().map(|n| n.layer_sizes().to_vec()).collect();
        if expected != got {
            return Err(Error::Parse(format!("network shapes {got:?} do not match the config ({expected:?})")));
        }
        Ok(Model { config, system, dt, horizon, nets })
    }
}

/// `‖g(x_k, t_k)‖∞` per sample. Points outside the invariant's domain give NaN.
pub fn violations(system: &SystemSpec, states: &[Vec<f64>], times: &[f64]) -> Vec<f64> {
    states
        .iter()
        .zip(times)
        .map(|(x, &t)| {
            let g = system.constraint(x, t);
            if g.iter().any(|v| v.is_nan()) {
                f64::NAN
            } else {
                g.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
            }
        })
        .collect()
}

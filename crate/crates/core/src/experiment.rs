//! Declarative experiments: data generation, seed sweeps, reports.
//!
//! A config names either a benchmark system with a list of models or the
//! battery case. Every (model, seed) pair trains independently; with the
//! `parallel` feature the pairs run on a rayon pool, otherwise in order.
//! Both paths produce the same rows in the same order.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::battery::{
    generate_discharge, BatteryModel, BatteryObjective, BatteryParams, Correction, CurrentProfile, Discharge,
    DischargeConfig, SMALL_HIDDEN,
};
use crate::error::{Error, Result};
use crate::integrate::{generate_reference, Integrator, ReferenceOptions};
use crate::metrics::{dtw, mae, mse, violation_summary};
use crate::models::{Model, ModelConfig};
use crate::systems::{SystemKind, SystemSpec, Trajectory};
use crate::train::{is_run_failure, train, ModelObjective, TrainConfig, TrainOutcome};

pub const REPORT_HEADER: &str = "system,model,projection,seed,mae,dtw,mean_viol,max_viol,final_loss,epochs,wall_s,diverged";
pub const REPORT_FILE: &str = "report.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Which part of the reference trajectory the metrics are computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalWindow {
    /// `[T, 2T]`: the model rolls out from `x0` for twice the training horizon.
    #[default]
    Continuation,
    /// `[0, T]`, the full training horizon.
    Training,
}

/// How `train_fraction` picks the training samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// The leading part of the horizon, every step.
    #[default]
    Prefix,
    /// The whole horizon, every `1/train_fraction`-th step.
    Stride,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Training horizon `K` in steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Share of the training grid the models see.
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub eval: EvalWindow,
    #[serde(default = "default_true")]
    pub projected: bool,
    #[serde(default = "default_data_tol")]
    pub tol: f64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Overrides the system's default initial state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
}

fn default_dt() -> f64 {
    0.01
}
fn default_steps() -> usize {
    1000
}
fn default_fraction() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_data_tol() -> f64 {
    1e-12
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dt: 0.01,
            steps: 1000,
            train_fraction: 1.0,
            sampling: Sampling::Prefix,
            eval: EvalWindow::Continuation,
            projected: true,
            tol: 1e-12,
            integrator: Integrator::Rk4,
            initial_state: None,
        }
    }
}

impl DataConfig {
    /// Model steps between training samples.
    pub fn stride(&self) -> usize {
        match self.sampling {
            Sampling::Prefix => 1,
            Sampling::Stride => ((1.0 / self.train_fraction).round() as usize).max(1),
        }
    }

    /// Model steps spanned by the training data.
    pub fn train_steps(&self) -> usize {
        match self.sampling {
            Sampling::Prefix => ((self.steps as f64 * self.train_fraction).round() as usize).max(1),
            Sampling::Stride => self.steps / self.stride() * self.stride(),
        }
    }

    /// The training subset of a reference trajectory.
    pub fn training_data(&self, reference: &Trajectory) -> Trajectory {
        let stride = self.stride();
        let pick = |v: &[Vec<f64>]| v[..=self.train_steps()].iter().step_by(stride).cloned().collect::<Vec<_>>();
        Trajectory {
            times: reference.times[..=self.train_steps()].iter().step_by(stride).copied().collect(),
            states: pick(&reference.states),
            inputs: reference.inputs.as_ref().map(|i| pick(i)),
        }
    }

    /// Steps of reference data needed for training and evaluation.
    pub fn total_steps(&self) -> usize {
        match self.eval {
            EvalWindow::Continuation => 2 * self.steps,
            EvalWindow::Training => self.steps,
        }
    }

    fn validate(&self, faults: &mut Vec<String>) {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            faults.push(format!("data.dt must be positive, got {}", self.dt));
        }
        if self.steps == 0 {
            faults.push("data.steps must be at least 1".to_string());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            faults.push(format!("data.train_fraction must lie in (0, 1], got {}", self.train_fraction));
        } else if self.sampling == Sampling::Stride {
            let inv = 1.0 / self.train_fraction;
            if (inv - inv.round()).abs() > 1e-9 * inv {
                faults.push(format!("data.train_fraction {} must be 1/n for stride sampling", self.train_fraction));
            } else if self.stride() > self.steps {
                faults.push("data.train_fraction leaves fewer than two training samples".to_string());
            }
        }
        if !(self.tol > 0.0) {
            faults.push(format!("data.tol must be positive, got {}", self.tol));
        }
    }
}

fn default_profiles() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_duration() -> f64 {
    20000.0
}
fn default_hidden() -> usize {
    SMALL_HIDDEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryExperiment {
    /// Constant discharge currents (A) used for training.
    #[serde(default = "default_profiles")]
    pub profiles: Vec<f64>,
    /// Currents used for evaluation; defaults to the training profiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_profiles: Option<Vec<f64>>,
    /// Upper bound on each discharge (s); the voltage cutoff usually ends it first.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub discharge: DischargeConfig,
    #[serde(default)]
    pub params: BatteryParams,
}

impl Default for BatteryExperiment {
    fn default() -> Self {
        BatteryExperiment {
            profiles: default_profiles(),
            eval_profiles: None,
            duration: default_duration(),
            hidden: SMALL_HIDDEN,
            discharge: DischargeConfig::default(),
            params: BatteryParams::default(),
        }
    }
}

impl BatteryExperiment {
    pub fn eval_profiles(&self) -> &[f64] {
        self.eval_profiles.as_deref().unwrap_or(&self.profiles)
    }

    pub fn discharges(&self, currents: &[f64]) -> Result<Vec<Discharge>> {
        currents
            .iter()
            .map(|&a| generate_discharge(&self.params, &CurrentProfile::constant(a, self.duration), &self.discharge))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatteryExperiment>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Fill the `wall_s` report column. Off by default so reruns produce
    /// byte-identical reports.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn for_system(system: SystemKind, models: Vec<ModelConfig>, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            name: None,
            system: Some(system),
            battery: None,
            data: DataConfig::default(),
            models,
            train: TrainConfig::default(),
            seeds,
            output_dir: None,
            record_wall_time: false,
        }
    }

    pub fn for_battery(battery: BatteryExperiment, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            name: None,
            system: None,
            battery: Some(battery),
            data: DataConfig::default(),
            models: Vec::new(),
            train: TrainConfig::default(),
            seeds,
            output_dir: None,
            record_wall_time: false,
        }
    }

    /// Parses and validates a TOML config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn check(&self) -> Result<()> {
        let faults = self.validate();
        if faults.is_empty() { Ok(()) } else { Err(Error::Config(faults)) }
    }

    /// Every problem with the config, or an empty list.
    pub fn validate(&self) -> Vec<String> {
        let mut faults = Vec::new();
        match (self.system, &self.battery) {
            (None, None) => faults.push("config needs either `system` or a `[battery]` block".to_string()),
            (Some(_), Some(_)) => faults.push("config sets both `system` and `[battery]`; choose one".to_string()),
            _ => {}
        }
        if self.seeds.is_empty() {
            faults.push("seeds must list at least one seed".to_string());
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                faults.push(format!("seed {s} is listed more than once"));
            }
        }
        self.data.validate(&mut faults);
        faults.extend(self.train.validate());
        if let Some(kind) = self.system {
            if self.models.is_empty() {
                faults.push("models must list at least one model".to_string());
            }
            let system = SystemSpec::new(kind);
            if let Some(x0) = &self.data.initial_state {
                if let Err(e) = SystemSpec::with_initial_state(kind, x0.clone()) {
                    faults.push(format!("data.initial_state: {e}"));
                }
            }
            let mut labels = HashSet::new();
            for m in &self.models {
                faults.extend(m.validate());
                if let Err(e) = m.layer_sizes(&system) {
                    faults.push(format!("{}: {e}", m.label()));
                }
                let key = (m.label(), m.projection_setting());
                if !labels.insert(key.clone()) {
                    faults.push(format!("model {} with projection {} appears twice", key.0, key.1.name()));
                }
            }
        }
        if let Some(b) = &self.battery {
            if !self.models.is_empty() {
                faults.push("battery experiments take no [[models]] entries".to_string());
            }
            faults.extend(b.params.validate());
            faults.extend(b.discharge.validate());
            if b.profiles.is_empty() {
                faults.push("battery.profiles must list at least one current".to_string());
            }
            if b.eval_profiles.as_ref().is_some_and(Vec::is_empty) {
                faults.push("battery.eval_profiles must not be empty".to_string());
            }
            for a in b.profiles.iter().chain(b.eval_profiles().iter()) {
                if !(a.is_finite() && *a >= 0.0) {
                    faults.push(format!("battery current {a} must be finite and non-negative"));
                }
            }
            if !(b.duration > 0.0) {
                faults.push(format!("battery.duration must be positive, got {}", b.duration));
            }
            if b.hidden == 0 {
                faults.push("battery.hidden must be at least 1".to_string());
            }
        }
        faults
    }

    pub fn system_label(&self) -> String {
        match self.system {
            Some(kind) => kind.name().to_string(),
            None => "battery".to_string(),
        }
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let kind = self.system.ok_or_else(|| Error::structural("config has no benchmark system"))?;
        match &self.data.initial_state {
            Some(x0) => SystemSpec::with_initial_state(kind, x0.clone()),
            None => Ok(SystemSpec::new(kind)),
        }
    }

    /// Reference trajectory over `[0, total_steps·dt]`.
    pub fn reference(&self) -> Result<Trajectory> {
        let system = self.system_spec()?;
        let opts = ReferenceOptions { integrator: self.data.integrator, projected: self.data.projected, tol: self.data.tol };
        generate_reference(&system, system.initial_state(), self.data.dt, self.data.total_steps(), opts)
    }
}

/// One report row.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub system: String,
    pub model: String,
    pub projection: String,
    pub seed: u64,
    pub mae: f64,
    pub dtw: f64,
    /// Absent for the battery, which has no implicit invariant.
    pub mean_viol: Option<f64>,
    pub max_viol: Option<f64>,
    /// Evaluation MSE; kept in memory, not part of the report schema.
    pub mse: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub wall_s: Option<f64>,
    pub diverged: bool,
    pub note: Option<String>,
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() { "NaN".to_string() } else { format!("{v:.9e}") }
}

fn parse_f(s: &str) -> Result<f64> {
    if s == "NaN" {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Parse(format!("bad number {s:?} in report")))
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.system,
            self.model,
            self.projection,
            self.seed,
            fmt_f(self.mae),
            fmt_f(self.dtw),
            opt(self.mean_viol),
            opt(self.max_viol),
            fmt_f(self.final_loss),
            self.epochs,
            self.wall_s.map(|w| format!("{w:.3}")).unwrap_or_default(),
            self.diverged
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Parse(format!("report row has {} fields, expected 12", f.len())));
        }
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { parse_f(s).map(Some) };
        Ok(RunRecord {
            system: f[0].to_string(),
            model: f[1].to_string(),
            projection: f[2].to_string(),
            seed: f[3].parse().map_err(|_| Error::Parse(format!("bad seed {:?}", f[3])))?,
            mae: parse_f(f[4])?,
            dtw: parse_f(f[5])?,
            mean_viol: opt(f[6])?,
            max_viol: opt(f[7])?,
            mse: f64::NAN,
            final_loss: parse_f(f[8])?,
            epochs: f[9].parse().map_err(|_| Error::Parse(format!("bad epoch count {:?}", f[9])))?,
            wall_s: opt(f[10])?,
            diverged: f[11].parse().map_err(|_| Error::Parse(format!("bad divergence flag {:?}", f[11])))?,
            note: None,
        })
    }
}

/// Files a run leaves behind, keyed by file name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunArtifacts {
    pub files: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub record: RunRecord,
    pub artifacts: RunArtifacts,
}

fn curve_csv(outcome: &TrainOutcome, with_wall: bool) -> String {
    let mut out = String::from("epoch,loss,eta,wall_seconds\n");
    for r in &outcome.curve {
        let wall = if with_wall { format!("{:.6}", r.wall_seconds) } else { String::new() };
        let _ = writeln!(out, "{},{:.16e},{:.16e},{wall}", r.epoch, r.loss, r.eta);
    }
    out
}

/// Windowed evaluation of a prediction against the reference.
fn evaluate(pred: &[Vec<f64>], truth: &[Vec<f64>], violations: &[f64]) -> Result<(f64, f64, f64, f64, f64)> {
    if pred.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::divergence("evaluation", "prediction is not finite"));
    }
    let (mean_v, max_v) = violation_summary(violations);
    Ok((mae(pred, truth)?, dtw(pred, truth)?, mean_v, max_v, mse(pred, truth)?))
}

/// Trains and evaluates one model on one seed.
pub fn run_system(
    config: &ExperimentConfig,
    reference: &Trajectory,
    model_config: &ModelConfig,
    seed: u64,
) -> Result<RunResult> {
    let system = config.system_spec()?;
    let data = &config.data;
    let mut model_config = model_config.clone();
    if model_config.integrator.is_none() {
        model_config.integrator = Some(data.integrator);
    }
    let k_train = data.train_steps();
    if reference.len() < data.total_steps() + 1 {
        return Err(Error::structural(format!(
            "reference has {} samples, the experiment needs {}",
            reference.len(),
            data.total_steps() + 1
        )));
    }
    let train_data = data.training_data(reference);
    let mut model = Model::init(model_config.clone(), system.clone(), data.dt, k_train, seed)?;
    let start = Instant::now();
    let outcome = {
        let mut objective = ModelObjective { model: &mut model, data: &train_data };
        train(&mut objective, &config.train)?
    };
    let wall = start.elapsed().as_secs_f64();
    let (window, steps) = match data.eval {
        EvalWindow::Continuation => (data.steps..2 * data.steps + 1, 2 * data.steps),
        EvalWindow::Training => (0..data.steps + 1, data.steps),
    };
    let mut record = RunRecord {
        system: config.system_label(),
        model: model_config.label(),
        projection: model_config.projection_setting().name().to_string(),
        seed,
        mae: f64::NAN,
        dtw: f64::NAN,
        mean_viol: Some(f64::NAN),
        max_viol: Some(f64::NAN),
        mse: f64::NAN,
        final_loss: outcome.final_loss(),
        epochs: outcome.epochs(),
        wall_s: config.record_wall_time.then_some(wall),
        diverged: outcome.diverged(),
        note: outcome.divergence.clone(),
    };
    let mut artifacts = RunArtifacts::default();
    artifacts.files.push(("loss_curve.csv".into(), curve_csv(&outcome, config.record_wall_time)));
    artifacts.files.push(("checkpoint.txt".into(), model.to_checkpoint()?));
    if !record.diverged {
        let evaluated = model.predict(system.initial_state(), 0.0, steps).and_then(|pred| {
            let metrics = evaluate(
                &pred.trajectory.states[window.clone()],
                &reference.states[window.clone()],
                &pred.violations[window.clone()],
            )?;
            Ok((pred, metrics))
        });
        match evaluated {
            Ok((pred, (m, d, mv, xv, se))) => {
                record.mae = m;
                record.dtw = d;
                record.mean_viol = Some(mv);
                record.max_viol = Some(xv);
                record.mse = se;
                artifacts.files.push(("prediction.csv".into(), pred.trajectory.to_csv()));
                if !pred.diagnostics.is_empty() {
                    let mut text = format!("{}\n", crate::projection::DIAGNOSTICS_HEADER);
                    for line in &pred.diagnostics {
                        text.push_str(line);
                        text.push('\n');
                    }
                    artifacts.files.push(("diagnostics.csv".into(), text));
                }
            }
            Err(e) if is_run_failure(&e) => {
                record.diverged = true;
                record.note = Some(format!("evaluation: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunResult { record, artifacts })
}

/// Battery label for the trained networks and for the zero-correction ablation.
pub const BATTERY_MODEL: &str = "HRPINN-Small";
pub const BATTERY_ABLATION: &str = "HRPINN-ZeroVINT";

fn battery_metrics(model: &BatteryModel, data: &[Discharge], correction: Correction) -> Result<(f64, f64, f64)> {
    let (mut m, mut d, mut s) = (0.0, 0.0, 0.0);
    for dis in data {
        let v = model.predict(&dis.states[0], &dis.currents, dis.dt, correction)?;
        let pred: Vec<Vec<f64>> = v.iter().map(|&x| vec![x]).collect();
        let truth: Vec<Vec<f64>> = dis.voltages.iter().map(|&x| vec![x]).collect();
        m += mae(&pred, &truth)?;
        d += dtw(&pred, &truth)?;
        s += mse(&pred, &truth)?;
    }
    let n = data.len() as f64;
    Ok((m / n, d / n, s / n))
}

/// Trains the battery networks for one seed; returns the trained row and
/// the zero-correction ablation row.
pub fn run_battery(
    config: &ExperimentConfig,
    train_data: &[Discharge],
    eval_data: &[Discharge],
    seed: u64,
) -> Result<Vec<RunResult>> {
    let b = config.battery.as_ref().ok_or_else(|| Error::structural("config has no battery block"))?;
    let mut model = BatteryModel::init(b.params.clone(), b.hidden, seed)?;
    model.integrator = b.discharge.integrator;
    let start = Instant::now();
    let outcome = {
        let mut objective = BatteryObjective::new(&mut model, train_data)?;
        train(&mut objective, &config.train)?
    };
    let wall = start.elapsed().as_secs_f64();
    let row = |model_name: &str, (m, d, s): (f64, f64, f64), loss: f64, epochs: usize, wall_s: Option<f64>| RunRecord {
        system: "battery".into(),
        model: model_name.into(),
        projection: "none".into(),
        seed,
        mae: m,
        dtw: d,
        mean_viol: None,
        max_viol: None,
        mse: s,
        final_loss: loss,
        epochs,
        wall_s,
        diverged: false,
        note: None,
    };
    let mut trained = row(BATTERY_MODEL, (f64::NAN, f64::NAN, f64::NAN), outcome.final_loss(), outcome.epochs(), None);
    trained.wall_s = config.record_wall_time.then_some(wall);
    trained.diverged = outcome.diverged();
    trained.note = outcome.divergence.clone();
    if !trained.diverged {
        match battery_metrics(&model, eval_data, Correction::Networks) {
            Ok((m, d, s)) => {
                trained.mae = m;
                trained.dtw = d;
                trained.mse = s;
            }
            Err(e) if is_run_failure(&e) => {
                trained.diverged = true;
                trained.note = Some(format!("evaluation: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    let ablation_fit = battery_metrics(&model, train_data, Correction::Zero)?;
    let ablation = row(BATTERY_ABLATION, battery_metrics(&model, eval_data, Correction::Zero)?, ablation_fit.2, 0, None);
    let mut artifacts = RunArtifacts::default();
    artifacts.files.push(("loss_curve.csv".into(), curve_csv(&outcome, config.record_wall_time)));
    artifacts.files.push(("positive_net.txt".into(), model.positive.to_checkpoint()));
    artifacts.files.push(("negative_net.txt".into(), model.negative.to_checkpoint()));
    Ok(vec![RunResult { record: trained, artifacts }, RunResult { record: ablation, artifacts: RunArtifacts::default() }])
}

/// Maps `f` over `items`, on a rayon pool when the `parallel` feature is on.
/// Output order always matches input order.
pub fn map_runs<T, R, F>(items: Vec<T>, threads: Option<usize>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .map_err(|e| Error::structural(format!("thread pool: {e}")))?;
        Ok(pool.install(|| items.into_par_iter().map(&f).collect()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(items.into_iter().map(f).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<RunRecord>,
}

/// Mean and sample standard deviation over the non-divergent runs of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub model: String,
    pub projection: String,
    pub runs: usize,
    pub diverged: usize,
    pub mae: (f64, f64),
    pub dtw: (f64, f64),
    pub mean_viol: (f64, f64),
    pub max_viol: (f64, f64),
    pub final_loss: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == REPORT_HEADER => {}
            other => return Err(Error::Parse(format!("unexpected report header {other:?}"))),
        }
        let rows = lines.filter(|l| !l.trim().is_empty()).map(RunRecord::from_csv_row).collect::<Result<_>>()?;
        Ok(ExperimentReport { rows })
    }

    /// Model keys in first-appearance order.
    pub fn models(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.model.clone(), r.projection.clone());
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        self.models()
            .into_iter()
            .map(|(model, projection)| {
                let rows: Vec<&RunRecord> =
                    self.rows.iter().filter(|r| r.model == model && r.projection == projection).collect();
                let ok: Vec<&RunRecord> = rows.iter().copied().filter(|r| !r.diverged).collect();
                let col = |f: &dyn Fn(&RunRecord) -> Option<f64>| {
                    mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                };
                Aggregate {
                    runs: rows.len(),
                    diverged: rows.len() - ok.len(),
                    mae: col(&|r| Some(r.mae)),
                    dtw: col(&|r| Some(r.dtw)),
                    mean_viol: col(&|r| r.mean_viol),
                    max_viol: col(&|r| r.max_viol),
                    final_loss: col(&|r| Some(r.final_loss)),
                    model,
                    projection,
                }
            })
            .collect()
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from(
            "model,projection,runs,diverged,mae_mean,mae_std,dtw_mean,dtw_std,mean_viol_mean,mean_viol_std,max_viol_mean,max_viol_std,final_loss_mean,final_loss_std\n",
        );
        for a in self.aggregates() {
            let _ = write!(out, "{},{},{},{}", a.model, a.projection, a.runs, a.diverged);
            for (m, s) in [a.mae, a.dtw, a.mean_viol, a.max_viol, a.final_loss] {
                let _ = write!(out, ",{},{}", fmt_f(m), fmt_f(s));
            }
            out.push('\n');
        }
        out
    }
}

pub const METRICS: [&str; 5] = ["mae", "dtw", "mean_viol", "max_viol", "final_loss"];

/// Models ordered best-first on one metric (lower is better). Models with
/// no finite mean go last.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRanking {
    pub metric: &'static str,
    pub order: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rankings: Vec<MetricRanking>,
    aggregates: Vec<Aggregate>,
}

fn key_label(model: &str, projection: &str) -> String {
    if projection == "none" { model.to_string() } else { format!("{model}-{projection}") }
}

impl Comparison {
    pub fn best(&self, metric: &str) -> Option<&str> {
        self.rankings.iter().find(|r| r.metric == metric)?.order.first().map(|(m, _)| m.as_str())
    }

    /// Mean of `metric` for a model key (`MODEL` or `MODEL-projection`).
    pub fn mean(&self, model: &str, metric: &str) -> Option<f64> {
        let a = self.aggregates.iter().find(|a| key_label(&a.model, &a.projection) == model || a.model == model)?;
        Some(metric_of(a, metric)?.0)
    }

    /// Whether `a`'s mean is below `b`'s by at least `factor`; `None` when
    /// either side has no finite value.
    pub fn claim_below(&self, a: &str, b: &str, metric: &str, factor: f64) -> Option<bool> {
        let (x, y) = (self.mean(a, metric)?, self.mean(b, metric)?);
        (x.is_finite() && y.is_finite()).then(|| x * factor < y)
    }

    /// `metric,rank,model,mean,best`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,rank,model,mean,best\n");
        for r in &self.rankings {
            for (i, (m, v)) in r.order.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", r.metric, i + 1, m, fmt_f(*v), i == 0 && v.is_finite());
            }
        }
        out
    }
}

fn metric_of(a: &Aggregate, metric: &str) -> Option<(f64, f64)> {
    Some(match metric {
        "mae" => a.mae,
        "dtw" => a.dtw,
        "mean_viol" => a.mean_viol,
        "max_viol" => a.max_viol,
        "final_loss" => a.final_loss,
        _ => return None,
    })
}

/// Per-metric rankings of the models in a report.
pub fn compare_models(report: &ExperimentReport) -> Comparison {
    let aggregates = report.aggregates();
    let rankings = METRICS
        .iter()
        .map(|&metric| {
            let mut order: Vec<(String, f64)> = aggregates
                .iter()
                .map(|a| (key_label(&a.model, &a.projection), metric_of(a, metric).map_or(f64::NAN, |v| v.0)))
                .collect();
            order.sort_by(|x, y| match (x.1.is_finite(), y.1.is_finite()) {
                (true, true) => x.1.total_cmp(&y.1),
                (true, false) => std::cmp::Ordering::Less,
                (false, true) => std::cmp::Ordering::Greater,
                (false, false) => std::cmp::Ordering::Equal,
            });
            MetricRanking { metric, order }
        })
        .collect();
    Comparison { rankings, aggregates }
}

fn run_dir_name(r: &RunRecord) -> String {
    let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect::<String>();
    format!("{}_{}_{}_seed{}", clean(&r.system), clean(&r.model), clean(&r.projection), r.seed)
}

/// Runs every (model, seed) pair and returns the results in config order.
pub fn run_sweep(config: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<RunResult>> {
    config.check()?;
    if config.battery.is_some() {
        let b = config.battery.as_ref().expect("checked");
        let train_data = b.discharges(&b.profiles)?;
        let eval_data = b.discharges(b.eval_profiles())?;
        let nested = map_runs(config.seeds.clone(), threads, |seed| run_battery(config, &train_data, &eval_data, seed))?;
        let mut out = Vec::new();
        for r in nested {
            out.extend(r?);
        }
        return Ok(out);
    }
    let reference = config.reference()?;
    let pairs: Vec<(usize, u64)> =
        (0..config.models.len()).flat_map(|m| config.seeds.iter().map(move |&s| (m, s))).collect();
    map_runs(pairs, threads, |(m, seed)| run_system(config, &reference, &config.models[m], seed))?
        .into_iter()
        .collect()
}

/// Runs the sweep and, when `out_dir` is given, writes the report,
/// aggregates, comparison and per-run artifacts there.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>, threads: Option<usize>) -> Result<ExperimentReport> {
    let results = run_sweep(config, threads)?;
    let report = ExperimentReport { rows: results.iter().map(|r| r.record.clone()).collect() };
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
        for r in &results {
            if r.artifacts.files.is_empty() {
                continue;
            }
            let run_dir = dir.join("runs").join(run_dir_name(&r.record));
            std::fs::create_dir_all(&run_dir)?;
            for (name, text) in &r.artifacts.files {
                std::fs::write(run_dir.join(name), text)?;
            }
        }
    }
    Ok(report)
}

pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_FILE), report.to_csv())?;
    std::fs::write(dir.join(AGGREGATE_FILE), report.aggregate_csv())?;
    if report.models().len() >= 2 {
        std::fs::write(dir.join(COMPARISON_FILE), compare_models(report).to_csv())?;
    }
    Ok(())
}

/// Writes the reference data: a trajectory CSV for benchmark systems, or
/// observation and latent CSVs per profile for the battery.
pub fn generate_data(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    config.check()?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if let Some(b) = &config.battery {
        let mut currents = b.profiles.clone();
        for a in b.eval_profiles() {
            if !currents.contains(a) {
                currents.push(*a);
            }
        }
        for (a, d) in currents.iter().zip(b.discharges(&currents)?) {
            let obs = dir.join(format!("discharge_{a}A.csv"));
            let latent = dir.join(format!("discharge_{a}A_latent.csv"));
            d.write_csv(&obs, &latent)?;
            written.extend([obs, latent]);
        }
    } else {
        let path = dir.join(format!("{}_reference.csv", config.system_label()));
        config.reference()?.write_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, ProjectionSetting};

    const SAMPLE: &str = r#"
name = "smoke"
system = "mass_spring"
seeds = [0]

[data]
steps = 20

[train]
epochs = 3

[[models]]
kind = "phrpinn"
projection = "fast"

[[models]]
kind = "node"
"#;

    #[test]
    fn parses_sample_config() {
        let c = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(c.system, Some(SystemKind::MassSpring));
        assert_eq!(c.models.len(), 2);
        assert_eq!(c.models[0].projection_setting(), ProjectionSetting::Fast);
        assert_eq!(c.data.dt, 0.01);
        assert_eq!(c.train.lr, 1e-3);
        let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation_enumerates_faults() {
        let text = r#"
seeds = [1, 1]
[data]
dt = -1.0
[train]
epochs = 0
"#;
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Config(f)) => {
                assert!(f.len() >= 4, "{f:?}");
                assert!(f.iter().any(|m| m.contains("system")));
                assert!(f.iter().any(|m| m.contains("seed 1")));
                assert!(f.iter().any(|m| m.contains("data.dt")));
                assert!(f.iter().any(|m| m.contains("epochs")));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(ExperimentConfig::from_toml_str("seeds = [0]\nbogus = 1"), Err(Error::Parse(_))));
        let mut c = ExperimentConfig::for_system(
            SystemKind::MassSpring,
            vec![ModelConfig::new(ModelKind::Node), ModelConfig::new(ModelKind::Node)],
            vec![0],
        );
        assert!(c.validate().iter().any(|m| m.contains("appears twice")));
        c.models.pop();
        assert!(c.validate().is_empty());
    }

    #[test]
    fn smoke_sweep_and_report_round_trip() {
        let c = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&c, Some(dir.path()), None).unwrap();
        assert_eq!(report.rows.len(), 2);
        for r in &report.rows {
            assert!(!r.diverged && r.mae.is_finite() && r.dtw.is_finite() && r.final_loss.is_finite(), "{r:?}");
            assert_eq!(r.epochs, 3);
            assert!(r.wall_s.is_none());
        }
        assert!(report.rows[0].max_viol.unwrap() < 1e-3, "{:?}", report.rows[0]);
        let text = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        let parsed = ExperimentReport::from_csv(&text).unwrap();
        assert_eq!(parsed.to_csv(), text);
        let run = dir.path().join("runs").join("mass_spring_PHRPINN_fast_seed0");
        for f in ["loss_curve.csv", "checkpoint.txt", "prediction.csv", "diagnostics.csv"] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert!(dir.path().join(COMPARISON_FILE).exists());
        let again = run_experiment(&c, None, None).unwrap();
        assert_eq!(again.to_csv(), text);
    }

    #[test]
    fn stride_sampling_spans_the_horizon() {
        let mut c = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        c.data.train_fraction = 0.25;
        c.data.sampling = Sampling::Stride;
        assert!(c.validate().is_empty());
        let reference = c.reference().unwrap();
        let train = c.data.training_data(&reference);
        assert_eq!(train.len(), 6);
        assert_eq!(train.states[5], reference.states[20]);
        assert!((train.dt() - 0.04).abs() < 1e-12);
        c.data.train_fraction = 0.3;
        assert!(c.validate().iter().any(|f| f.contains("1/n")));
        c.data.train_fraction = 0.25;
        c.models.truncate(1);
        let report = run_experiment(&c, None, None).unwrap();
        assert!(report.rows[0].mae.is_finite());
    }

    fn record(model: &str, seed: u64, value: f64, diverged: bool) -> RunRecord {
        RunRecord {
            system: "mass_spring".into(),
            model: model.into(),
            projection: "none".into(),
            seed,
            mae: value,
            dtw: value,
            mean_viol: Some(value),
            max_viol: Some(value),
            mse: value,
            final_loss: value,
            epochs: 1,
            wall_s: None,
            diverged,
            note: None,
        }
    }

    #[test]
    fn aggregates_skip_divergent_runs() {
        let report = ExperimentReport {
            rows: vec![record("A", 0, 1.0, false), record("A", 1, 3.0, false), record("A", 2, f64::NAN, true)],
        };
        let a = &report.aggregates()[0];
        assert_eq!((a.runs, a.diverged), (3, 1));
        assert_eq!(a.mae.0, 2.0);
        assert!((a.mae.1 - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dominant_model_ranks_first() {
        let report = ExperimentReport {
            rows: vec![record("A", 0, 1.0, false), record("B", 0, 0.5, false), record("C", 0, f64::NAN, true)],
        };
        let c = compare_models(&report);
        for r in &c.rankings {
            assert_eq!(r.order[0].0, "B");
            assert_eq!(r.order[2].0, "C");
        }
        assert_eq!(c.claim_below("B", "A", "final_loss", 1.0), Some(true));
        assert_eq!(c.claim_below("B", "A", "final_loss", 10.0), Some(false));
        assert_eq!(c.claim_below("C", "A", "mae", 1.0), None);
        assert!(c.to_csv().contains("mae,1,B,5.000000000e-1,true"));
    }

    #[test]
    fn seed_permutation_permutes_rows() {
        let mut c = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        c.models.truncate(1);
        c.seeds = vec![3, 7];
        let a = run_experiment(&c, None, None).unwrap();
        c.seeds = vec![7, 3];
        let b = run_experiment(&c, None, None).unwrap();
        assert_eq!(a.rows[0].csv_row(), b.rows[1].csv_row());
        assert_eq!(a.rows[1].csv_row(), b.rows[0].csv_row());
    }
}

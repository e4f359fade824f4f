//! Adam with a plateau scheduler and global-norm clipping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::systems::Trajectory;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Adam {
            m: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update `θ ← θ − η·m̂/(√v̂ + ε)`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::structural(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::structural(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(j) = g.first_non_finite() {
                return Err(Error::divergence(format!("gradient of parameter {i}"), format!("element {j} is not finite")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((theta, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Relative improvement needed to reset the patience counter.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
}

fn default_factor() -> f64 {
    0.5
}
fn default_patience() -> usize {
    10
}
fn default_threshold() -> f64 {
    1e-4
}
fn default_min_lr() -> f64 {
    1e-6
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 10, threshold: 1e-4, min_lr: 1e-6 }
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    config: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        Plateau { config, lr, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.config.threshold) || self.best == f64::INFINITY {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_clip() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub plateau: PlateauConfig,
    /// Global gradient-norm bound applied before each Adam step.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, lr: 1e-3, plateau: PlateauConfig::default(), clip_norm: 100.0 }
    }
}

impl TrainConfig {
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut faults = Vec::new();
        if self.epochs == 0 {
            faults.push("train.epochs must be at least 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            faults.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            faults.push(format!("train.clip_norm must be positive, got {}", self.clip_norm));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) {
            faults.push(format!("train.plateau.factor must lie in (0, 1), got {}", p.factor));
        }
        if p.patience == 0 {
            faults.push("train.plateau.patience must be at least 1".to_string());
        }
        if !(p.threshold >= 0.0) {
            faults.push(format!("train.plateau.threshold must be non-negative, got {}", p.threshold));
        }
        if !(p.min_lr > 0.0) {
            faults.push(format!("train.plateau.min_lr must be positive, got {}", p.min_lr));
        }
        faults
    }
}

/// Something Adam can fit: parameters plus a differentiable loss.
pub trait Objective {
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn params(&self) -> Vec<&Tensor>;
    fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)>;
}

/// A model paired with its training trajectory.
pub struct ModelObjective<'a> {
    pub model: &'a mut Model,
    pub data: &'a Trajectory,
}

impl Objective for ModelObjective<'_> {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.params_mut()
    }
    fn params(&self) -> Vec<&Tensor> {
        self.model.params()
    }
    fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
        self.model.loss_and_grads(self.data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss at the start of the epoch, before its update.
    pub loss: f64,
    /// Learning rate used for the epoch's update.
    pub eta: f64,
    /// Seconds since training started.
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    /// Why training stopped early, if it did.
    pub divergence: Option<String>,
    pub wall_seconds: f64,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn epochs(&self) -> usize {
        self.curve.len()
    }

    /// `epoch,loss,eta,wall_seconds`
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,loss,eta,wall_seconds\n");
        for r in &self.curve {
            out.push_str(&format!("{},{:.16e},{:.16e},{:.6}\n", r.epoch, r.loss, r.eta, r.wall_seconds));
        }
        out
    }
}

/// Full-batch training. A divergent loss, gradient or rollout ends training
/// early with the curve truncated and the reason recorded; the parameters
/// keep their last finite values.
pub fn train<O: Objective>(objective: &mut O, config: &TrainConfig) -> Result<TrainOutcome> {
    let faults = config.validate();
    if !faults.is_empty() {
        return Err(Error::Config(faults));
    }
    let start = Instant::now();
    let mut adam = Adam::new(&objective.params());
    let mut schedule = Plateau::new(config.plateau, config.lr);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut divergence = None;
    for epoch in 0..config.epochs {
        let (loss, mut grads) = match objective.loss_and_grads() {
            Ok(v) => v,
            Err(e) if is_run_failure(&e) => {
                divergence = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let eta = schedule.lr();
        clip_global_norm(&mut grads, config.clip_norm);
        if let Err(e) = adam.update(&mut objective.params_mut(), &grads, eta) {
            if e.is_divergence() {
                divergence = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            return Err(e);
        }
        curve.push(EpochRecord { epoch, loss, eta, wall_seconds: start.elapsed().as_secs_f64() });
        schedule.observe(loss);
    }
    Ok(TrainOutcome { curve, divergence, wall_seconds: start.elapsed().as_secs_f64() })
}

/// Numerical failures that end one run without aborting a sweep.
pub fn is_run_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. }
            | Error::NonConvergence { .. }
            | Error::ConstraintQualification(_)
            | Error::NonDegeneracy(_)
            | Error::Singularity(_)
            | Error::Domain(_)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(&[&p]);
        adam.update(&mut [&mut p], &[Tensor::scalar(2.0)], 0.001).unwrap();
        assert!((p.item() - 0.999).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut adam = Adam::new(&[&p]);
        adam.update(&mut [&mut p], &[Tensor::vector(vec![3.0, 1.0])], 0.01).unwrap();
        let before = p.clone();
        adam.update(&mut [&mut p], &[Tensor::zeros(&[2])], 0.0).unwrap();
        assert_eq!(p, before);
        let (m, _) = adam.moments();
        assert!((m[0].data()[0] - 0.9 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn adam_symmetry() {
        let mut a = Tensor::scalar(0.5);
        let mut b = Tensor::scalar(0.5);
        let mut adam = Adam::new(&[&a, &b]);
        adam.update(&mut [&mut a, &mut b], &[Tensor::scalar(0.7), Tensor::scalar(0.7)], 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(&[&p]);
        assert!(adam.update(&mut [&mut p], &[Tensor::scalar(f64::NAN)], 0.1).unwrap_err().is_divergence());
    }

    #[test]
    fn plateau_examples() {
        let mut s = Plateau::new(PlateauConfig::default(), 1e-3);
        for i in 0..30 {
            assert_eq!(s.observe(10.0 - i as f64 * 0.1), 1e-3);
        }
        let mut s = Plateau::new(PlateauConfig::default(), 1e-3);
        let lrs: Vec<f64> = (0..11).map(|_| s.observe(1.0)).collect();
        assert_eq!(lrs[9], 1e-3);
        assert_eq!(lrs[10], 5e-4);
        let mut s = Plateau::new(PlateauConfig::default(), 1e-6);
        for _ in 0..50 {
            assert_eq!(s.observe(1.0), 1e-6);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![300.0, 400.0])];
        assert_eq!(clip_global_norm(&mut g, 100.0), 500.0);
        assert!((g[0].data()[0] - 60.0).abs() < 1e-12 && (g[0].data()[1] - 80.0).abs() < 1e-12);
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        clip_global_norm(&mut g, 100.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
    }

    struct Quadratic(Tensor);

    impl Objective for Quadratic {
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
        fn params(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
            let d = self.0.data();
            let loss = d.iter().map(|v| (v - 1.0).powi(2)).sum();
            Ok((loss, vec![self.0.map(|v| 2.0 * (v - 1.0))]))
        }
    }

    #[test]
    fn single_step_descends() {
        let mut q = Quadratic(Tensor::vector(vec![3.0, -1.0]));
        let before = q.loss_and_grads().unwrap().0;
        train(&mut q, &TrainConfig::default().with_epochs(1)).unwrap();
        assert!(q.loss_and_grads().unwrap().0 < before);
    }

    #[test]
    fn training_converges_and_is_deterministic() {
        let cfg = TrainConfig { lr: 0.05, ..TrainConfig::default().with_epochs(300) };
        let mut a = Quadratic(Tensor::vector(vec![3.0, -1.0]));
        let mut b = Quadratic(Tensor::vector(vec![3.0, -1.0]));
        let ra = train(&mut a, &cfg).unwrap();
        let rb = train(&mut b, &cfg).unwrap();
        let best = ra.curve.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-6 && ra.final_loss() < 1e-2 * ra.curve[0].loss);
        let losses = |r: &TrainOutcome| r.curve.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&ra), losses(&rb));
        assert!(ra.curve_csv().starts_with("epoch,loss,eta,wall_seconds\n0,"));
    }

    struct Exploding;

    impl Objective for Exploding {
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            Vec::new()
        }
        fn params(&self) -> Vec<&Tensor> {
            Vec::new()
        }
        fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
            Err(Error::divergence("step 3", "NaN"))
        }
    }

    #[test]
    fn divergence_truncates() {
        let out = train(&mut Exploding, &TrainConfig::default()).unwrap();
        assert!(out.diverged());
        assert_eq!(out.epochs(), 0);
        assert!(out.final_loss().is_nan());
    }

    #[test]
    fn config_validation_lists_every_fault() {
        let cfg = TrainConfig { epochs: 0, lr: -1.0, ..TrainConfig::default() };
        assert!(matches!(train(&mut Exploding, &cfg), Err(Error::Config(f)) if f.len() == 2));
    }
}

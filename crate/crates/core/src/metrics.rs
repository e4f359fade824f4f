//! Evaluation metrics over state series.

use crate::error::{Error, Result};
use crate::systems::{SystemSpec, Trajectory};

/// Mean absolute error: averaged over dimensions, then over steps.
pub fn mae(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::structural(format!("mae: {} predicted steps vs {} true steps", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::structural("mae: empty series"));
    }
    let mut total = 0.0;
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::structural(format!("mae: step {k} has widths {} and {}", p.len(), t.len())));
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    }
    Ok(total / pred.len() as f64)
}

/// Mean squared error with the same averaging as [`mae`].
pub fn mse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::structural(format!("mse: {} predicted steps vs {} true steps", pred.len(), truth.len())));
    }
    let mut total = 0.0;
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::structural(format!("mse: step {k} has widths {} and {}", p.len(), t.len())));
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    }
    Ok(total / pred.len() as f64)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Unwindowed, unnormalized dynamic time warping with Euclidean local cost
/// and the symmetric match/insert/delete step pattern.
pub fn dtw(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::structural("dtw: empty series"));
    }
    let width = pred[0].len();
    if pred.iter().chain(truth).any(|x| x.len() != width) {
        return Err(Error::structural("dtw: series have inconsistent state widths"));
    }
    let m = truth.len();
    // Two rolling rows of the cumulative cost matrix.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for p in pred {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = euclid(p, &truth[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Mean and max of per-step `‖g‖∞`. NaN entries propagate to both.
pub fn violation_summary(per_step: &[f64]) -> (f64, f64) {
    if per_step.is_empty() {
        return (0.0, 0.0);
    }
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    let max = per_step.iter().fold(0.0_f64, |m, &v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) });
    (mean, max)
}

pub fn violation_stats(system: &SystemSpec, traj: &Trajectory) -> (f64, f64) {
    violation_summary(&crate::models::violations(system, &traj.states, &traj.times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{generate_reference, ReferenceOptions};
    use crate::systems::SystemKind;

    fn s(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&s(&[1.0, 2.0]), &s(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mae(&s(&[1.0, 2.0]), &s(&[1.0, 3.0])).unwrap(), 0.5);
        let a = vec![vec![0.5, -1.0], vec![2.0, 3.0]];
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 0.25).collect()).collect();
        assert_eq!(mae(&a, &b).unwrap(), 0.25);
        assert!(matches!(mae(&s(&[1.0]), &s(&[1.0, 2.0])), Err(Error::Structural(_))));
    }

    #[test]
    fn dtw_examples() {
        let a = s(&[0.3, 1.2, -0.4]);
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw(&s(&[0.0, 0.0, 1.0, 1.0]), &s(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dtw(&s(&[2.0]), &s(&[-1.5])).unwrap(), 3.5);
        assert!(matches!(dtw(&[], &a), Err(Error::Structural(_))));
    }

    #[test]
    fn dtw_bounded_by_identity_alignment() {
        let a = vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.5]];
        let b = vec![vec![0.1, 0.9], vec![1.5, 1.0], vec![2.0, 0.0]];
        let identity: f64 = a.iter().zip(&b).map(|(x, y)| euclid(x, y)).sum();
        let d = dtw(&a, &b).unwrap();
        assert!(d <= identity + 1e-15);
        assert_eq!(d, dtw(&b, &a).unwrap());
    }

    #[test]
    fn violation_examples() {
        assert_eq!(violation_summary(&[0.1, 0.3]), (0.2, 0.3));
        let (mean, max) = violation_summary(&[0.1, f64::NAN]);
        assert!(mean.is_nan() && max.is_nan());
        let sys = SystemSpec::new(SystemKind::MassSpring);
        let traj = generate_reference(&sys, sys.initial_state(), 0.01, 200, ReferenceOptions::default()).unwrap();
        let (mean, max) = violation_stats(&sys, &traj);
        assert!(mean <= 1e-12 && max <= 1e-12);
    }
}

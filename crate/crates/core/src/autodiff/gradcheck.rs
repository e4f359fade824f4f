use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max_i |numeric_i - analytic_i| / (|analytic_i| + 1e-12)
    pub max_relative_error: f64,
}

impl GradCheck {
    /// ‖numeric − analytic‖₂ / max(‖analytic‖₂, 1e-12)
    pub fn normwise_relative_error(&self) -> f64 {
        let diff: f64 = self.numeric.iter().zip(&self.analytic).map(|(n, a)| (n - a).powi(2)).sum();
        let norm: f64 = self.analytic.iter().map(|a| a * a).sum();
        diff.sqrt() / norm.sqrt().max(1e-12)
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&tape, leaf);
    let value = out.try_value()?;
    if value.len() != 1 {
        return Err(Error::structural(format!("gradient check needs a scalar output, got {:?}", value.shape())));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::divergence("finite-difference probe", format!("f evaluated to {v}")));
    }
    Ok(v)
}

/// Checks the backward pass of `f` at `x` against central differences with
/// step `h` along every coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&tape, leaf);
    let value = out.try_value()?;
    if value.len() != 1 {
        return Err(Error::structural(format!("gradient check needs a scalar output, got {:?}", value.shape())));
    }
    if !value.is_finite() {
        return Err(Error::divergence("finite-difference base point", format!("f evaluated to {}", value.item())));
    }
    let seed = Tensor::filled(&out.shape(), 1.0);
    let analytic = tape.backward(out, seed)?.wrt(leaf).into_data();

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let max_relative_error = numeric
        .iter()
        .zip(&analytic)
        .map(|(n, a)| (n - a).abs() / (a.abs() + 1e-12))
        .fold(0.0, f64::max);
    Ok(GradCheck { analytic, numeric, max_relative_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let r = finite_difference_check(|_, x| x * x, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-6, "{}", r.max_relative_error);
    }

    #[test]
    fn constant_has_zero_error() {
        let r = finite_difference_check(|t, x| x.scale(0.0).sum() + t.scalar(4.0), &Tensor::vector(vec![1.0, -2.0]), 1e-5)
            .unwrap();
        assert!(r.max_relative_error < 1e-9);
        assert!(r.analytic.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_probe_is_divergence() {
        let err = finite_difference_check(|_, x| x.ln(), &Tensor::scalar(1e-7), 1e-5).unwrap_err();
        assert!(err.is_divergence());
    }

    #[test]
    fn vector_output_rejected() {
        let err = finite_difference_check(|_, x| x.scale(2.0), &Tensor::vector(vec![1.0, 2.0]), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }
}

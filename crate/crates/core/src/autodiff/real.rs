use std::ops::{Add, Mul, Neg, Sub};

use super::tape::Var;
use super::tensor::Tensor;

/// Scalar-like arithmetic shared by plain `f64` and tape variables.
///
/// Model equations are written once against this trait. A `Var` may hold a
/// scalar or a `[batch]` column; every operation is elementwise, so the same
/// code evaluates one state or a batch of states.
pub trait Real: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    /// Constant `c` living alongside `self` (same tape for variables).
    fn lift(self, c: f64) -> Self;
    fn scale(self, c: f64) -> Self;
    fn add_scalar(self, c: f64) -> Self;
    fn recip(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn asinh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn square(self) -> Self;

    fn div(self, other: Self) -> Self {
        self * other.recip()
    }

    /// Integer power by repeated multiplication; `powi(0)` is `lift(1.0)`.
    fn powi(self, k: u32) -> Self {
        let mut acc = self.lift(1.0);
        for _ in 0..k {
            acc = acc * self;
        }
        acc
    }
}

impl Real for f64 {
    fn lift(self, c: f64) -> Self {
        c
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn add_scalar(self, c: f64) -> Self {
        self + c
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn asinh(self) -> Self {
        f64::asinh(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn div(self, other: Self) -> Self {
        self / other
    }
}

impl Real for Var<'_> {
    fn lift(self, c: f64) -> Self {
        self.tape().constant(Tensor::scalar(c))
    }
    fn scale(self, c: f64) -> Self {
        Var::scale(self, c)
    }
    fn add_scalar(self, c: f64) -> Self {
        Var::add_scalar(self, c)
    }
    fn recip(self) -> Self {
        Var::recip(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn asinh(self) -> Self {
        Var::asinh(self)
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn square(self) -> Self {
        Var::square(self)
    }
}

//! Orthogonal projection onto `{x : g(x) = 0}` and its derivatives.
//!
//! The projection of `x̃` is the stationary point of the KKT system
//!
//! ```text
//! x − x̃ + Gᵀλ = 0
//!        g(x) = 0
//! ```
//!
//! solved either to tolerance by damped Newton (robust) or by one linearized
//! step at `x̃` (fast). Gradients flow back through the implicit function
//! theorem: robust mode solves the bordered sensitivity system including
//! constraint curvature, fast mode applies the tangent-space projector.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomForward, CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::systems::{check_full_row_rank, SystemSpec, HESSIAN_FD_STEP};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 20;
/// Relative size of the smallest singular value of the bordered matrix
/// below which the sensitivity system is treated as singular.
const NON_DEGENERACY_TOL: f64 = 1e-13;

/// A constraint set `g(x) = 0` with Jacobian `G` and curvature `∇²gᵢ`.
pub trait Manifold: Send + Sync {
    fn state_dim(&self) -> usize;
    fn constraint_dim(&self) -> usize;
    fn g(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;

    /// Central differences of the Jacobian unless overridden.
    fn hessians(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let (m, n) = (self.constraint_dim(), self.state_dim());
        let mut out = vec![DMatrix::zeros(n, n); m];
        let mut probe = x.to_vec();
        for j in 0..n {
            probe[j] = x[j] + HESSIAN_FD_STEP;
            let plus = self.jacobian(&probe);
            probe[j] = x[j] - HESSIAN_FD_STEP;
            let minus = self.jacobian(&probe);
            probe[j] = x[j];
            for (i, h) in out.iter_mut().enumerate() {
                for k in 0..n {
                    h[(k, j)] = (plus[(i, k)] - minus[(i, k)]) / (2.0 * HESSIAN_FD_STEP);
                }
            }
        }
        out
    }
}

/// A benchmark system's constraint frozen at time `t`.
#[derive(Clone, Debug)]
pub struct SystemManifold {
    system: SystemSpec,
    t: f64,
}

impl SystemManifold {
    pub fn new(system: &SystemSpec, t: f64) -> Self {
        SystemManifold { system: system.clone(), t }
    }
}

impl Manifold for SystemManifold {
    fn state_dim(&self) -> usize {
        self.system.state_dim()
    }
    fn constraint_dim(&self) -> usize {
        self.system.constraint_dim()
    }
    fn g(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.system.eval_constraint(x, self.t)
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.system.constraint_jacobian(x, self.t)
    }
    fn hessians(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        self.system.constraint_hessians(x, self.t)
    }
}

/// `A x = b`.
#[derive(Clone, Debug)]
pub struct AffineManifold {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl AffineManifold {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::structural(format!("{} constraint rows but {} offsets", a.nrows(), b.len())));
        }
        Ok(AffineManifold { a, b })
    }
}

impl Manifold for AffineManifold {
    fn state_dim(&self) -> usize {
        self.a.ncols()
    }
    fn constraint_dim(&self) -> usize {
        self.a.nrows()
    }
    fn g(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.a * DVector::from_column_slice(x) - &self.b).as_slice().to_vec())
    }
    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }
    fn hessians(&self, _x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.state_dim();
        vec![DMatrix::zeros(n, n); self.constraint_dim()]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Fast,
    #[default]
    Robust,
}

impl ProjectionMode {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionMode::Fast => "fast",
            ProjectionMode::Robust => "robust",
        }
    }
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(ProjectionMode::Fast),
            "robust" => Ok(ProjectionMode::Robust),
            _ => Err(Error::Parse(format!("unknown projection mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub x_star: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Linear solves performed.
    pub iterations: usize,
    /// `‖F(x*, λ)‖∞` of the KKT system.
    pub kkt_residual: f64,
    pub mode: ProjectionMode,
}

impl ProjectionResult {
    /// `step,mode,iterations,kkt_residual`
    pub fn diagnostics_line(&self, step: usize) -> String {
        format!("{step},{},{},{:.16e}", self.mode, self.iterations, self.kkt_residual)
    }
}

pub const DIAGNOSTICS_HEADER: &str = "step,mode,iterations,kkt_residual";

/// KKT residual `[x − x̃ + Gᵀλ; g(x)]`.
fn kkt_residual(m: &dyn Manifold, x: &[f64], x_tilde: &[f64], lambda: &[f64]) -> Result<DVector<f64>> {
    let n = x.len();
    let g = m.g(x)?;
    let jac = m.jacobian(x);
    let stationarity = DVector::from_fn(n, |i, _| x[i] - x_tilde[i]) + jac.transpose() * DVector::from_column_slice(lambda);
    let mut f = DVector::zeros(n + g.len());
    f.rows_mut(0, n).copy_from(&stationarity);
    f.rows_mut(n, g.len()).copy_from_slice(&g);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence("projection", "non-finite KKT residual"));
    }
    Ok(f)
}

/// `[[I + Σλᵢ∇²gᵢ, Gᵀ], [G, 0]]` at `x`.
fn bordered_matrix(m: &dyn Manifold, x: &[f64], lambda: &[f64], jac: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.len();
    let k = lambda.len();
    let mut top_left = DMatrix::identity(n, n);
    if lambda.iter().any(|&l| l != 0.0) {
        for (h, &l) in m.hessians(x).iter().zip(lambda) {
            top_left += h * l;
        }
    }
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&top_left);
    kkt.view_mut((0, n), (n, k)).copy_from(&jac.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(jac);
    kkt
}

fn check_dims(m: &dyn Manifold, x_tilde: &[f64]) -> Result<()> {
    if x_tilde.len() != m.state_dim() {
        return Err(Error::structural(format!(
            "projection expects state dimension {}, got {}",
            m.state_dim(),
            x_tilde.len()
        )));
    }
    if let Some(i) = x_tilde.iter().position(|v| !v.is_finite()) {
        return Err(Error::divergence("projection input", format!("component {i} is {}", x_tilde[i])));
    }
    Ok(())
}

/// Damped minimum-norm Gauss-Newton on `g` alone. Stops once `‖g‖∞ ≤ tol`,
/// when no halving reduces `‖g‖₂`, or after `budget` solves.
fn restore_feasibility(m: &dyn Manifold, start: &[f64], tol: f64, budget: usize) -> Result<(Vec<f64>, usize)> {
    let mut x = start.to_vec();
    let mut g = DVector::from_vec(m.g(&x)?);
    let mut solves = 0;
    while solves < budget && g.amax() > tol {
        let (q, r) = qr_of_transpose(&m.jacobian(&x))?;
        let Some(y) = r.transpose().solve_lower_triangular(&g) else { break };
        let step = -(&q * &y);
        solves += 1;
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..=MAX_HALVINGS {
            let x_try: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Ok(g_try) = m.g(&x_try) {
                let g_try = DVector::from_vec(g_try);
                if g_try.norm() < g.norm() {
                    next = Some((x_try, g_try));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, g_new)) = next else { break };
        x = x_new;
        g = g_new;
    }
    Ok((x, solves))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimises `‖x − x̃‖` over the manifold with restoration after every
/// step: a tangent Newton step on the Lagrangian when it points downhill,
/// otherwise the projected gradient, halved until the distance drops. Ends
/// at a feasible point with `‖J(x̃ − x)‖∞ ≤ tol` unless `budget` steps run
/// out.
fn descend_on_manifold(m: &dyn Manifold, x_tilde: &[f64], tol: f64, budget: usize) -> Result<(Vec<f64>, usize)> {
    let (mut x, mut solves) = restore_feasibility(m, x_tilde, tol, budget)?;
    let n = x.len();
    for _ in 0..budget {
        let jac = m.jacobian(&x);
        let toward = DVector::from_fn(n, |i, _| x_tilde[i] - x[i]);
        let d = tangent_projector(&jac)? * &toward;
        solves += 1;
        if d.amax() <= tol {
            break;
        }
        let lambda = multiplier_estimate(m, &x, x_tilde)?;
        let mut rhs = DVector::zeros(n + lambda.len());
        rhs.rows_mut(0, n).copy_from(&d);
        let newton = bordered_matrix(m, &x, &lambda, &jac).lu().solve(&rhs).map(|s| s.rows(0, n).into_owned());
        solves += 1;
        let direction = match newton {
            Some(s) if s.dot(&d) > 0.0 => s,
            _ => d,
        };
        let here = distance(&x, x_tilde);
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = (0..n).map(|i| x[i] + alpha * direction[i]).collect();
            if let Ok((back, used)) = restore_feasibility(m, &trial, tol, budget) {
                solves += used;
                let feasible = m.g(&back).is_ok_and(|g| g.iter().all(|v| v.abs() <= tol));
                if feasible && distance(&back, x_tilde) < here {
                    next = Some(back);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(x_new) = next else { break };
        x = x_new;
    }
    Ok((x, solves))
}

/// Least-squares multipliers for stationarity at `x`:
/// `argmin_λ ‖x − x̃ + Gᵀλ‖₂`.
fn multiplier_estimate(m: &dyn Manifold, x: &[f64], x_tilde: &[f64]) -> Result<Vec<f64>> {
    let (q, r) = qr_of_transpose(&m.jacobian(x))?;
    let d = DVector::from_fn(x.len(), |i, _| x_tilde[i] - x[i]);
    let rhs = q.transpose() * d;
    let lambda = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::ConstraintQualification("triangular factor of Gᵀ is singular".into()))?;
    Ok(lambda.as_slice().to_vec())
}

enum Newton {
    Converged { x: Vec<f64>, lambda: Vec<f64>, residual: f64, solves: usize },
    /// No damping factor decreased `‖F‖₂`.
    Stalled { solves: usize, residual: f64 },
}

/// Damped Newton on the bordered KKT system from `(x, λ)`. Always performs
/// at least one solve.
fn newton_kkt(
    m: &dyn Manifold,
    x_tilde: &[f64],
    mut x: Vec<f64>,
    mut lambda: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Newton> {
    let n = x.len();
    let k = lambda.len();
    let mut f = kkt_residual(m, &x, x_tilde, &lambda)?;
    let mut solves = 0;
    loop {
        if solves > 0 && f.amax() <= tol {
            return Ok(Newton::Converged { x, lambda, residual: f.amax(), solves });
        }
        if solves >= max_iter {
            return Err(Error::NonConvergence { iterations: solves, residual: f.amax() });
        }
        let jac = m.jacobian(&x);
        check_full_row_rank(&jac)?;
        let kkt = bordered_matrix(m, &x, &lambda, &jac);
        let step = kkt.lu().solve(&(-&f)).ok_or_else(|| {
            Error::ConstraintQualification("bordered KKT matrix is singular".into())
        })?;
        solves += 1;

        let norm = f.norm();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let x_try: Vec<f64> = (0..n).map(|i| x[i] + alpha * step[i]).collect();
            let l_try: Vec<f64> = (0..k).map(|i| lambda[i] + alpha * step[n + i]).collect();
            if let Ok(f_try) = kkt_residual(m, &x_try, x_tilde, &l_try) {
                if f_try.norm() < norm || f_try.amax() <= tol {
                    accepted = Some((x_try, l_try, f_try));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, l_new, f_new)) = accepted else {
            return Ok(Newton::Stalled { solves, residual: f.amax() });
        };
        x = x_new;
        lambda = l_new;
        f = f_new;
    }
}

/// Damped Newton on the full KKT system from `(x̃, 0)`; stops once
/// `‖F‖∞ ≤ tol`. If the line search stalls, which happens when `x̃` sits
/// outside the manifold's tubular neighbourhood, descends to a local
/// minimiser of the distance and restarts Newton there. `iterations`
/// counts every linear solve; `max_iter` caps each phase.
pub fn project_robust(m: &dyn Manifold, x_tilde: &[f64], tol: f64, max_iter: usize) -> Result<ProjectionResult> {
    check_dims(m, x_tilde)?;
    let k = m.constraint_dim();
    let result = |x_star, lambda, iterations, kkt_residual| ProjectionResult {
        x_star,
        lambda,
        iterations,
        kkt_residual,
        mode: ProjectionMode::Robust,
    };
    let first = match newton_kkt(m, x_tilde, x_tilde.to_vec(), vec![0.0; k], tol, max_iter)? {
        Newton::Converged { x, lambda, residual, solves } => return Ok(result(x, lambda, solves, residual)),
        Newton::Stalled { solves, .. } => solves,
    };
    let (x, descent) = descend_on_manifold(m, x_tilde, tol, max_iter)?;
    let lambda = multiplier_estimate(m, &x, x_tilde)?;
    let spent = first + descent;
    match newton_kkt(m, x_tilde, x, lambda, tol, max_iter) {
        Ok(Newton::Converged { x, lambda, residual, solves }) => Ok(result(x, lambda, spent + solves, residual)),
        Ok(Newton::Stalled { solves, residual }) => Err(Error::NonConvergence { iterations: spent + solves, residual }),
        Err(Error::NonConvergence { iterations, residual }) => {
            Err(Error::NonConvergence { iterations: spent + iterations, residual })
        }
        Err(e) => Err(e),
    }
}

/// Thin QR of `Gᵀ`: `Gᵀ = QR` with `Q` n × m orthonormal and `R` m × m.
fn qr_of_transpose(jac: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_full_row_rank(jac)?;
    let qr = jac.transpose().qr();
    Ok((qr.q(), qr.r()))
}

/// One Hessian-neglected KKT step at `x̃`: `δ = −Gᵀ(GGᵀ)⁻¹g(x̃)`, formed as
/// `−Q R⁻ᵀ g` from the QR factors of `Gᵀ`.
pub fn project_fast(m: &dyn Manifold, x_tilde: &[f64]) -> Result<ProjectionResult> {
    check_dims(m, x_tilde)?;
    let g = DVector::from_vec(m.g(x_tilde)?);
    let jac = m.jacobian(x_tilde);
    let (q, r) = qr_of_transpose(&jac)?;
    let singular = || Error::ConstraintQualification("triangular factor of Gᵀ is singular".into());
    // Rᵀ y = g, then λ = R⁻¹ y.
    let y = r.transpose().solve_lower_triangular(&g).ok_or_else(singular)?;
    let lambda = r.solve_upper_triangular(&y).ok_or_else(singular)?;
    let delta = -(&q * &y);
    let x_star: Vec<f64> = x_tilde.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
    let kkt = kkt_residual(m, &x_star, x_tilde, lambda.as_slice())?;
    Ok(ProjectionResult {
        x_star,
        lambda: lambda.as_slice().to_vec(),
        iterations: 1,
        kkt_residual: kkt.amax(),
        mode: ProjectionMode::Fast,
    })
}

pub fn project(m: &dyn Manifold, x_tilde: &[f64], mode: ProjectionMode, tol: f64, max_iter: usize) -> Result<ProjectionResult> {
    match mode {
        ProjectionMode::Fast => project_fast(m, x_tilde),
        ProjectionMode::Robust => project_robust(m, x_tilde, tol, max_iter),
    }
}

/// `J = I − QQᵀ` with `Q` an orthonormal basis of the row space of `G`;
/// equal to `I − Gᵀ(GGᵀ)⁻¹G` without forming `GGᵀ`.
pub fn tangent_projector(jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, _) = qr_of_transpose(jac)?;
    let n = jac.ncols();
    Ok(DMatrix::identity(n, n) - &q * q.transpose())
}

/// `uᵀ dx*/dx̃` from the transposed bordered sensitivity system.
pub fn projection_backward_exact(m: &dyn Manifold, x_star: &[f64], lambda: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let n = x_star.len();
    if upstream.len() != n || lambda.len() != m.constraint_dim() {
        return Err(Error::structural("backward shapes do not match the manifold"));
    }
    if upstream.iter().all(|&u| u == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let jac = m.jacobian(x_star);
    let kkt = bordered_matrix(m, x_star, lambda, &jac);
    let sigma = kkt.clone().svd(false, false).singular_values;
    if sigma.min() <= NON_DEGENERACY_TOL * sigma.max() {
        return Err(Error::NonDegeneracy(format!(
            "bordered KKT matrix has singular value ratio {:e}",
            sigma.min() / sigma.max()
        )));
    }
    let mut rhs = DVector::zeros(n + lambda.len());
    rhs.rows_mut(0, n).copy_from_slice(upstream);
    let sol = kkt
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonDegeneracy("bordered KKT matrix is singular".into()))?;
    Ok(sol.rows(0, n).iter().copied().collect())
}

/// `J_Π(x*) u`; the projector is symmetric.
pub fn projection_backward_fast(jac: &DMatrix<f64>, upstream: &[f64]) -> Result<Vec<f64>> {
    let j = tangent_projector(jac)?;
    Ok((j * DVector::from_column_slice(upstream)).as_slice().to_vec())
}

/// Projection recorded as a tape operation on a `[n]` state.
pub struct ProjectionOp {
    manifold: Arc<dyn Manifold>,
    mode: ProjectionMode,
    tol: f64,
    max_iter: usize,
}

impl ProjectionOp {
    pub fn new(manifold: Arc<dyn Manifold>, mode: ProjectionMode, tol: f64, max_iter: usize) -> Self {
        ProjectionOp { manifold, mode, tol, max_iter }
    }

    /// Records the projection of `x` and returns the projected node with
    /// its result.
    pub fn apply<'t>(self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, ProjectionResult)> {
        let mode = self.mode;
        let (out, saved) = tape.custom(Arc::new(self), &[x])?;
        let x_star = out.try_value()?.into_data();
        let (lambda, diag) = (saved[0].data().to_vec(), saved[1].data());
        Ok((
            out,
            ProjectionResult { x_star, lambda, iterations: diag[0] as usize, kkt_residual: diag[1], mode },
        ))
    }
}

impl CustomOp for ProjectionOp {
    fn name(&self) -> &'static str {
        match self.mode {
            ProjectionMode::Fast => "project_fast",
            ProjectionMode::Robust => "project_robust",
        }
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [[n]] if *n == self.manifold.state_dim() => Ok(vec![*n]),
            other => Err(Error::structural(format!(
                "projection expects one [{}] input, got {other:?}",
                self.manifold.state_dim()
            ))),
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<CustomForward> {
        let r = project(self.manifold.as_ref(), inputs[0].data(), self.mode, self.tol, self.max_iter)?;
        Ok(CustomForward {
            value: Tensor::vector(r.x_star),
            saved: vec![Tensor::vector(r.lambda), Tensor::vector(vec![r.iterations as f64, r.kkt_residual])],
        })
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, saved: &[Tensor], grad: &Tensor) -> Result<Vec<Tensor>> {
        let x_star = output.data();
        let g = match self.mode {
            ProjectionMode::Robust => {
                projection_backward_exact(self.manifold.as_ref(), x_star, saved[0].data(), grad.data())?
            }
            ProjectionMode::Fast => projection_backward_fast(&self.manifold.jacobian(x_star), grad.data())?,
        };
        Ok(vec![Tensor::vector(g)])
    }
}

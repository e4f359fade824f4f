//! Lithium-ion cell as a semi-explicit index-1 DAE.
//!
//! Differential state `x = [q_b,p, q_s,p, q_b,n, q_s,n, V'_o, V'_η,p, V'_η,n]`
//! (charges in C, filtered voltages in V). The algebraic variables follow from
//! `x` and the applied current by an explicit forward cascade.
//!
//! The activity correction `V_INT` only reaches the terminal voltage; the
//! charge and filter dynamics never see it. The HRPINN variant therefore
//! integrates the differential states with the known rates and evaluates the
//! two correction networks on the resulting mole-fraction series in one batch.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::integrate::{at_step, Integrator};
use crate::nn::{BoundMlp, Mlp};
use crate::train::Objective;

/// Half-width of the clamp around the `x = 0.5` pole of the expansion.
pub const RK_GUARD: f64 = 1e-6;
/// Mole fractions are clamped to `[ε, 1-ε]` inside the Nernst logarithm.
pub const MOLE_GUARD: f64 = 1e-6;
pub const STATE_DIM: usize = 7;
pub const STATE_NAMES: [&str; STATE_DIM] = ["q_b_p", "q_s_p", "q_b_n", "q_s_n", "v_o_f", "v_eta_p_f", "v_eta_n_f"];
/// Hidden width of each correction network: two (1, 11, 1) nets, 68 parameters.
pub const SMALL_HIDDEN: usize = 11;

const ELECTRODE_NAMES: [&str; 2] = ["p", "n"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Electrode {
    /// Reference potential U_0 (V).
    pub u0: f64,
    /// Redlich–Kister coefficients A_0..A_N (J/mol).
    pub rk: Vec<f64>,
    /// Surface area S (m²).
    pub area: f64,
    /// Lumped rate constant k (A/m²).
    pub rate: f64,
    pub v_surface: f64,
    pub v_bulk: f64,
    /// Overpotential filter time constant (s).
    pub tau_eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryParams {
    pub q_max: f64,
    pub gas_constant: f64,
    pub faraday: f64,
    pub electrons: f64,
    pub diffusion: f64,
    pub tau_o: f64,
    pub alpha: f64,
    pub r_o: f64,
    /// Cell temperature (K), held constant.
    pub temperature: f64,
    pub positive: Electrode,
    pub negative: Electrode,
}

impl Default for BatteryParams {
    fn default() -> Self {
        BatteryParams {
            q_max: 1.32e4,
            gas_constant: 8.314,
            faraday: 96487.0,
            electrons: 1.0,
            diffusion: 7.0e6,
            tau_o: 10.0,
            alpha: 0.5,
            r_o: 0.085,
            temperature: 298.0,
            positive: Electrode {
                u0: 4.03,
                rk: vec![
                    -33642.23, 0.11, 23506.89, -74679.26, 14359.34, 307849.79, 85053.13, -1075148.06, 2173.62,
                    991586.68, 283423.47, -163020.34, -470297.35,
                ],
                area: 2e-4,
                rate: 2e4,
                v_surface: 2e-6,
                v_bulk: 2e-5,
                tau_eta: 90.0,
            },
            negative: Electrode {
                u0: 0.01,
                rk: vec![86.19],
                area: 2e-4,
                rate: 2e4,
                v_surface: 2e-6,
                v_bulk: 2e-5,
                tau_eta: 90.0,
            },
        }
    }
}

impl BatteryParams {
    pub fn electrode(&self, i: usize) -> &Electrode {
        if i == 0 { &self.positive } else { &self.negative }
    }

    /// Surface capacity, taken as the volume share of `q_max`.
    pub fn q_max_surface(&self, i: usize) -> f64 {
        let e = self.electrode(i);
        self.q_max * e.v_surface / (e.v_surface + e.v_bulk)
    }

    /// `RT/(nF)`
    pub fn thermal_voltage(&self) -> f64 {
        self.gas_constant * self.temperature / (self.electrons * self.faraday)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut faults = Vec::new();
        let scalars = [
            ("q_max", self.q_max),
            ("gas_constant", self.gas_constant),
            ("faraday", self.faraday),
            ("electrons", self.electrons),
            ("diffusion", self.diffusion),
            ("tau_o", self.tau_o),
            ("r_o", self.r_o),
            ("temperature", self.temperature),
        ];
        for (name, v) in scalars {
            if !(v > 0.0 && v.is_finite()) {
                faults.push(format!("battery.{name} must be positive, got {v}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            faults.push(format!("battery.alpha must lie in (0, 1), got {}", self.alpha));
        }
        for (i, tag) in ELECTRODE_NAMES.iter().enumerate() {
            let e = self.electrode(i);
            for (name, v) in
                [("area", e.area), ("rate", e.rate), ("v_surface", e.v_surface), ("v_bulk", e.v_bulk), ("tau_eta", e.tau_eta)]
            {
                if !(v > 0.0 && v.is_finite()) {
                    faults.push(format!("battery electrode {tag}: {name} must be positive, got {v}"));
                }
            }
            if e.rk.iter().any(|a| !a.is_finite()) {
                faults.push(format!("battery electrode {tag}: non-finite Redlich-Kister coefficient"));
            }
        }
        faults
    }

    /// Fully relaxed state with the given mole fractions: bulk and surface
    /// concentrations equal, filters at zero.
    pub fn initial_state(&self, x_p: f64, x_n: f64) -> [f64; STATE_DIM] {
        let mut x = [0.0; STATE_DIM];
        for (i, frac) in [x_p, x_n].into_iter().enumerate() {
            let e = self.electrode(i);
            let total = frac * self.q_max;
            let surface = total * e.v_surface / (e.v_surface + e.v_bulk);
            x[2 * i] = total - surface;
            x[2 * i + 1] = surface;
        }
        x
    }
}

/// Redlich–Kister activity correction in the printed grouping
/// `(1/nF) Σ_k A_k [u^(k+1) − (k·u − (x−1))·u^(k−1)]` with `u = 2x−1`.
/// Returns the value and whether `u` had to be clamped away from zero.
pub fn redlich_kister(x: f64, coeffs: &[f64], electrons: f64, faraday: f64) -> (f64, bool) {
    let mut u = 2.0 * x - 1.0;
    let clamped = u.abs() < RK_GUARD;
    if clamped {
        u = RK_GUARD.copysign(u);
    }
    let mut sum = 0.0;
    for (k, a) in coeffs.iter().enumerate() {
        let kf = k as f64;
        sum += a * (u.powi(k as i32 + 1) - (kf * u - (x - 1.0)) * u.powi(k as i32 - 1));
    }
    (sum / (electrons * faraday), clamped)
}

/// The `x`-dependent part of the cascade that does not involve `V_INT`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kinetics {
    pub c_b: [f64; 2],
    pub c_s: [f64; 2],
    pub x: [f64; 2],
    pub x_s: [f64; 2],
    pub j: [f64; 2],
    pub j0: [f64; 2],
    pub v_eta: [f64; 2],
    pub v_o: f64,
    pub q_bs: [f64; 2],
    /// `U_0 + (RT/nF) ln((1−x)/x)` per electrode.
    pub nernst: [f64; 2],
}

/// Every algebraic variable of the cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct Algebraic {
    pub kinetics: Kinetics,
    pub v_int: [f64; 2],
    pub v_u: [f64; 2],
    pub voltage: f64,
    /// Set when the expansion was evaluated at the clamped pole.
    pub rk_clamped: bool,
}

fn in_unit_interval(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} is outside (0, 1)")))
    }
}

/// Concentrations, mole fractions, kinetics, ohmic drop and diffusion rates.
pub fn kinetics(p: &BatteryParams, x: &[f64; STATE_DIM], i_app: f64) -> Result<Kinetics> {
    let mut k = Kinetics {
        c_b: [0.0; 2],
        c_s: [0.0; 2],
        x: [0.0; 2],
        x_s: [0.0; 2],
        j: [0.0; 2],
        j0: [0.0; 2],
        v_eta: [0.0; 2],
        v_o: i_app * p.r_o,
        q_bs: [0.0; 2],
        nernst: [0.0; 2],
    };
    let vt = p.thermal_voltage();
    for i in 0..2 {
        let e = p.electrode(i);
        let (qb, qs) = (x[2 * i], x[2 * i + 1]);
        k.c_b[i] = qb / e.v_bulk;
        k.c_s[i] = qs / e.v_surface;
        k.x[i] = (qb + qs) / p.q_max;
        k.x_s[i] = qs / p.q_max_surface(i);
        in_unit_interval(&format!("x_{}", ELECTRODE_NAMES[i]), k.x[i])?;
        in_unit_interval(&format!("x_s,{}", ELECTRODE_NAMES[i]), k.x_s[i])?;
        k.j[i] = i_app / e.area;
        k.j0[i] = e.rate * (1.0 - k.x_s[i]).powf(p.alpha) * k.x_s[i].powf(1.0 - p.alpha);
        k.v_eta[i] = 2.0 * p.gas_constant * p.temperature / p.faraday * (k.j[i] / (2.0 * k.j0[i])).asinh();
        k.q_bs[i] = (k.c_b[i] - k.c_s[i]) / p.diffusion;
        let xi = k.x[i].clamp(MOLE_GUARD, 1.0 - MOLE_GUARD);
        k.nernst[i] = e.u0 + vt * ((1.0 - xi) / xi).ln();
    }
    Ok(k)
}

/// Terminal voltage from kinetics, filtered states and the two corrections.
pub fn terminal_voltage<S: crate::autodiff::Real>(kin: &Kinetics, x: &[f64; STATE_DIM], v_int: [S; 2]) -> S {
    let filters = x[4] + x[5] + x[6];
    (v_int[0] - v_int[1]).add_scalar(kin.nernst[0] - kin.nernst[1] - filters)
}

/// Solves the full algebraic cascade with the Redlich–Kister corrections.
pub fn solve_algebraic(p: &BatteryParams, x: &[f64; STATE_DIM], i_app: f64) -> Result<Algebraic> {
    let kin = kinetics(p, x, i_app)?;
    let (vp, cp) = redlich_kister(kin.x[0], &p.positive.rk, p.electrons, p.faraday);
    let (vn, cn) = redlich_kister(kin.x[1], &p.negative.rk, p.electrons, p.faraday);
    Ok(assemble(kin, x, [vp, vn], cp || cn))
}

/// Same cascade with externally supplied corrections.
pub fn solve_algebraic_with(p: &BatteryParams, x: &[f64; STATE_DIM], i_app: f64, v_int: [f64; 2]) -> Result<Algebraic> {
    Ok(assemble(kinetics(p, x, i_app)?, x, v_int, false))
}

fn assemble(kin: Kinetics, x: &[f64; STATE_DIM], v_int: [f64; 2], rk_clamped: bool) -> Algebraic {
    let v_u = [kin.nernst[0] + v_int[0], kin.nernst[1] + v_int[1]];
    let voltage = terminal_voltage(&kin, x, v_int);
    Algebraic { kinetics: kin, v_int, v_u, voltage, rk_clamped }
}

/// Residual of every algebraic constraint at a solved point, each written
/// out independently of the cascade.
pub fn algebraic_residuals(p: &BatteryParams, x: &[f64; STATE_DIM], i_app: f64, z: &Algebraic) -> Vec<f64> {
    let k = &z.kinetics;
    let vt = p.thermal_voltage();
    let mut r = vec![z.voltage - (z.v_u[0] - z.v_u[1] - x[4] - x[5] - x[6])];
    for i in 0..2 {
        let e = p.electrode(i);
        let xi = k.x[i].clamp(MOLE_GUARD, 1.0 - MOLE_GUARD);
        let (rk, _) = redlich_kister(k.x[i], &e.rk, p.electrons, p.faraday);
        r.push(z.v_u[i] - (e.u0 + vt * ((1.0 - xi) / xi).ln() + z.v_int[i]));
        r.push(z.v_int[i] - rk);
        r.push(k.v_eta[i] - 2.0 * p.gas_constant * p.temperature / p.faraday * (k.j[i] / (2.0 * k.j0[i])).asinh());
        r.push(k.j[i] - i_app / e.area);
        r.push(k.j0[i] - e.rate * (1.0 - k.x_s[i]).powf(p.alpha) * k.x_s[i].powf(1.0 - p.alpha));
        r.push(k.q_bs[i] - (k.c_b[i] - k.c_s[i]) / p.diffusion);
        r.push(k.c_b[i] - x[2 * i] / e.v_bulk);
        r.push(k.c_s[i] - x[2 * i + 1] / e.v_surface);
        r.push(k.x[i] - (x[2 * i] + x[2 * i + 1]) / p.q_max);
        r.push(k.x_s[i] - x[2 * i + 1] / p.q_max_surface(i));
    }
    r.push(k.v_o - i_app * p.r_o);
    r
}

/// Rates of the seven differential states.
pub fn battery_derivative(p: &BatteryParams, x: &[f64; STATE_DIM], kin: &Kinetics, i_app: f64) -> [f64; STATE_DIM] {
    [
        -kin.q_bs[0],
        i_app + kin.q_bs[0],
        -kin.q_bs[1],
        -i_app + kin.q_bs[1],
        (kin.v_o - x[4]) / p.tau_o,
        (kin.v_eta[0] - x[5]) / p.positive.tau_eta,
        (kin.v_eta[1] - x[6]) / p.negative.tau_eta,
    ]
}

/// Piecewise-constant applied current: `(duration_s, amps)` segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentProfile {
    pub segments: Vec<(f64, f64)>,
}

impl CurrentProfile {
    pub fn constant(amps: f64, duration: f64) -> Self {
        CurrentProfile { segments: vec![(duration, amps)] }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.0).sum()
    }

    pub fn current(&self, t: f64) -> f64 {
        let mut end = 0.0;
        for &(d, a) in &self.segments {
            end += d;
            if t < end {
                return a;
            }
        }
        self.segments.last().map_or(0.0, |s| s.1)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut faults = Vec::new();
        if self.segments.is_empty() {
            faults.push("current profile has no segments".to_string());
        }
        for (i, &(d, a)) in self.segments.iter().enumerate() {
            if !(d > 0.0 && d.is_finite()) {
                faults.push(format!("current segment {i}: duration must be positive, got {d}"));
            }
            if !a.is_finite() {
                faults.push(format!("current segment {i}: current must be finite"));
            }
        }
        faults
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DischargeConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_x_p0")]
    pub x_p0: f64,
    #[serde(default = "default_x_n0")]
    pub x_n0: f64,
    #[serde(default)]
    pub integrator: Integrator,
}

fn default_dt() -> f64 {
    1.0
}
fn default_cutoff() -> f64 {
    2.7
}
fn default_x_p0() -> f64 {
    0.4
}
fn default_x_n0() -> f64 {
    0.6
}

impl Default for DischargeConfig {
    fn default() -> Self {
        DischargeConfig { dt: 1.0, cutoff: 2.7, x_p0: 0.4, x_n0: 0.6, integrator: Integrator::Rk4 }
    }
}

impl DischargeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut faults = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            faults.push(format!("discharge.dt must be positive, got {}", self.dt));
        }
        if !self.cutoff.is_finite() {
            faults.push("discharge.cutoff must be finite".to_string());
        }
        for (name, v) in [("x_p0", self.x_p0), ("x_n0", self.x_n0)] {
            if !(v > 0.0 && v < 1.0) {
                faults.push(format!("discharge.{name} must lie in (0, 1), got {v}"));
            }
        }
        faults
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StopReason {
    Cutoff,
    ProfileEnd,
    /// The state left the model's domain; the message says where.
    DomainExit(String),
}

/// A generated discharge: observations plus the latent differential states.
#[derive(Clone, Debug, PartialEq)]
pub struct Discharge {
    pub dt: f64,
    pub temperature: f64,
    pub times: Vec<f64>,
    pub currents: Vec<f64>,
    pub voltages: Vec<f64>,
    pub states: Vec<[f64; STATE_DIM]>,
    pub stop: StopReason,
    /// Steps at which the expansion pole clamp was active.
    pub clamped_steps: Vec<usize>,
}

impl Discharge {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn truncated(&self) -> bool {
        matches!(self.stop, StopReason::DomainExit(_))
    }

    /// `t,i_app,T,V`
    pub fn observations_csv(&self) -> String {
        let mut out = String::from("t,i_app,T,V\n");
        for k in 0..self.len() {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[k], self.currents[k], self.temperature, self.voltages[k]
            );
        }
        out
    }

    pub fn latent_csv(&self) -> String {
        let mut out = format!("t,{}\n", STATE_NAMES.join(","));
        for (t, x) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t:.16e}");
            for v in x {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, observations: &Path, latent: &Path) -> Result<()> {
        std::fs::write(observations, self.observations_csv())?;
        std::fs::write(latent, self.latent_csv())?;
        Ok(())
    }
}

/// Advances the differential state by one step; the current is held at its
/// value at the step start.
pub fn step_state(
    p: &BatteryParams,
    integrator: Integrator,
    x: &[f64; STATE_DIM],
    i_app: f64,
    t: f64,
    dt: f64,
) -> Result<[f64; STATE_DIM]> {
    let rhs = |s: &Vec<f64>, _t: f64| -> Result<Vec<f64>> {
        let xs: [f64; STATE_DIM] = s.as_slice().try_into().map_err(|_| Error::structural("battery state width"))?;
        let kin = kinetics(p, &xs, i_app)?;
        Ok(battery_derivative(p, &xs, &kin, i_app).to_vec())
    };
    let next = integrator.step(rhs, &x.to_vec(), t, dt)?;
    let mut out = [0.0; STATE_DIM];
    out.copy_from_slice(&next);
    Ok(out)
}

/// Integrates the full DAE until the voltage reaches the cutoff, the profile
/// ends, or the state leaves the domain.
pub fn generate_discharge(p: &BatteryParams, profile: &CurrentProfile, config: &DischargeConfig) -> Result<Discharge> {
    let mut faults = p.validate();
    faults.extend(profile.validate());
    faults.extend(config.validate());
    if !faults.is_empty() {
        return Err(Error::Config(faults));
    }
    let mut out = Discharge {
        dt: config.dt,
        temperature: p.temperature,
        times: Vec::new(),
        currents: Vec::new(),
        voltages: Vec::new(),
        states: Vec::new(),
        stop: StopReason::ProfileEnd,
        clamped_steps: Vec::new(),
    };
    let mut x = p.initial_state(config.x_p0, config.x_n0);
    let end = profile.duration();
    let mut k = 0usize;
    loop {
        let t = k as f64 * config.dt;
        let i_app = profile.current(t);
        let z = match solve_algebraic(p, &x, i_app) {
            Ok(z) => z,
            Err(e @ Error::Domain(_)) => {
                out.stop = StopReason::DomainExit(format!("step {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if z.rk_clamped {
            out.clamped_steps.push(k);
        }
        out.times.push(t);
        out.currents.push(i_app);
        out.voltages.push(z.voltage);
        out.states.push(x);
        if z.voltage <= config.cutoff {
            out.stop = StopReason::Cutoff;
            break;
        }
        if t + config.dt > end + 1e-9 * config.dt {
            break;
        }
        x = match step_state(p, config.integrator, &x, i_app, t, config.dt) {
            Ok(next) => next,
            Err(e @ Error::Domain(_)) => {
                out.stop = StopReason::DomainExit(format!("step {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        k += 1;
    }
    Ok(out)
}

/// Where the HRPINN cell gets its `V_INT` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Correction {
    Networks,
    /// The true expansion, for oracle substitution checks.
    Oracle,
    /// Both corrections fixed at zero.
    Zero,
}

/// Battery HRPINN: known cell physics with two scalar correction networks.
#[derive(Clone, Debug, PartialEq)]
pub struct BatteryModel {
    pub params: BatteryParams,
    pub positive: Mlp,
    pub negative: Mlp,
    pub integrator: Integrator,
}

/// Mole-fraction and voltage-offset series of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBasis {
    pub x_p: Vec<f64>,
    pub x_n: Vec<f64>,
    /// Voltage with both corrections set to zero.
    pub base_voltage: Vec<f64>,
}

impl BatteryModel {
    pub fn init(params: BatteryParams, hidden: usize, seed: u64) -> Result<Self> {
        Ok(BatteryModel {
            params,
            positive: Mlp::init(&[1, hidden, 1], crate::models::net_seed(seed, 0))?,
            negative: Mlp::init(&[1, hidden, 1], crate::models::net_seed(seed, 1))?,
            integrator: Integrator::Rk4,
        })
    }

    pub fn param_count(&self) -> usize {
        self.positive.param_count() + self.negative.param_count()
    }

    /// Integrates the cell from `x0` under the recorded currents.
    pub fn basis(&self, x0: &[f64; STATE_DIM], currents: &[f64], dt: f64) -> Result<RolloutBasis> {
        let mut basis = RolloutBasis { x_p: Vec::new(), x_n: Vec::new(), base_voltage: Vec::new() };
        let mut x = *x0;
        for (k, &i_app) in currents.iter().enumerate() {
            if k > 0 {
                x = step_state(&self.params, self.integrator, &x, currents[k - 1], (k - 1) as f64 * dt, dt)
                    .map_err(at_step(k))?;
            }
            let kin = kinetics(&self.params, &x, i_app).map_err(at_step(k))?;
            basis.base_voltage.push(terminal_voltage(&kin, &x, [0.0, 0.0]));
            basis.x_p.push(kin.x[0]);
            basis.x_n.push(kin.x[1]);
        }
        Ok(basis)
    }

    /// Predicted voltages for a rollout basis, recorded on `tape`.
    pub fn voltages_on_tape<'t>(
        &self,
        tape: &'t Tape,
        nets: Option<(&BoundMlp<'t>, &BoundMlp<'t>)>,
        basis: &RolloutBasis,
        correction: Correction,
    ) -> Result<Var<'t>> {
        let n = basis.x_p.len();
        let base = tape.constant(Tensor::vector(basis.base_voltage.clone()));
        match correction {
            Correction::Zero => Ok(base),
            Correction::Oracle => {
                let offsets: Vec<f64> = basis
                    .x_p
                    .iter()
                    .zip(&basis.x_n)
                    .map(|(&xp, &xn)| self.oracle_correction(xp, xn))
                    .collect();
                Ok(base + tape.constant(Tensor::vector(offsets)))
            }
            Correction::Networks => {
                let (np, nn) = nets.ok_or_else(|| Error::structural("network correction needs bound networks"))?;
                let xp = tape.constant(Tensor::new(vec![n, 1], basis.x_p.clone())?);
                let xn = tape.constant(Tensor::new(vec![n, 1], basis.x_n.clone())?);
                let vp = np.forward(xp)?.column(0);
                let vn = nn.forward(xn)?.column(0);
                Ok(base + vp - vn)
            }
        }
    }

    fn oracle_correction(&self, xp: f64, xn: f64) -> f64 {
        let p = &self.params;
        redlich_kister(xp, &p.positive.rk, p.electrons, p.faraday).0
            - redlich_kister(xn, &p.negative.rk, p.electrons, p.faraday).0
    }

    /// Voltage prediction without a tape.
    pub fn predict(&self, x0: &[f64; STATE_DIM], currents: &[f64], dt: f64, correction: Correction) -> Result<Vec<f64>> {
        let basis = self.basis(x0, currents, dt)?;
        let tape = Tape::new();
        let (bp, bn) = (self.positive.bind(&tape), self.negative.bind(&tape));
        let v = self.voltages_on_tape(&tape, Some((&bp, &bn)), &basis, correction)?;
        Ok(v.value().data().to_vec())
    }
}

/// Voltage-only training target: several discharges sharing one model.
pub struct BatteryObjective<'a> {
    pub model: &'a mut BatteryModel,
    bases: Vec<RolloutBasis>,
    targets: Vec<Vec<f64>>,
}

impl<'a> BatteryObjective<'a> {
    pub fn new(model: &'a mut BatteryModel, data: &[Discharge]) -> Result<Self> {
        let mut bases = Vec::with_capacity(data.len());
        for d in data {
            let x0 = d.states.first().ok_or_else(|| Error::structural("empty discharge"))?;
            bases.push(model.basis(x0, &d.currents, d.dt)?);
        }
        Ok(BatteryObjective { model, bases, targets: data.iter().map(|d| d.voltages.clone()).collect() })
    }
}

impl Objective for BatteryObjective<'_> {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.model.positive.params_mut();
        out.extend(self.model.negative.params_mut());
        out
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.model.positive.params();
        out.extend(self.model.negative.params());
        out
    }

    /// Mean over discharges of the voltage MSE.
    fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let (bp, bn) = (self.model.positive.bind(&tape), self.model.negative.bind(&tape));
        let mut total: Option<Var> = None;
        for (basis, target) in self.bases.iter().zip(&self.targets) {
            let v = self.model.voltages_on_tape(&tape, Some((&bp, &bn)), basis, Correction::Networks)?;
            let err = (v - tape.constant(Tensor::vector(target.clone()))).square().mean();
            total = Some(match total {
                Some(t) => t + err,
                None => err,
            });
        }
        let loss = total.ok_or_else(|| Error::structural("no discharges to fit"))?.scale(1.0 / self.bases.len() as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::divergence("battery loss", format!("value {value}")));
        }
        let grads = tape.backward(loss, Tensor::scalar(1.0))?;
        let params: Vec<Var> = bp.params().into_iter().chain(bn.params()).collect();
        Ok((value, params.iter().map(|&p| grads.wrt(p)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BatteryParams {
        BatteryParams::default()
    }

    /// Direct transcription of one expansion term, kept separate from the
    /// production evaluator.
    fn rk_term_by_term(x: f64, coeffs: &[f64], f: f64) -> f64 {
        let mut acc = 0.0;
        for (k, a) in coeffs.iter().enumerate() {
            let k = k as f64;
            let base = 2.0 * x - 1.0;
            acc += a * (base.powf(k + 1.0) - (k * base - (x - 1.0)) / base.powf(1.0 - k));
        }
        acc / f
    }

    #[test]
    fn rk_examples() {
        let p = params();
        let (v, clamped) = redlich_kister(0.25, &p.negative.rk, 1.0, p.faraday);
        assert!(!clamped);
        assert!((v - 86.19 / 96487.0).abs() < 1e-15);
        assert!((v - 8.93e-4).abs() < 5e-7);
        assert_eq!(redlich_kister(0.3, &[0.0; 5], 1.0, p.faraday).0, 0.0);
        for &x in &[0.05, 0.3, 0.45, 0.62, 0.9] {
            let a = redlich_kister(x, &p.positive.rk, 1.0, p.faraday).0;
            let b = rk_term_by_term(x, &p.positive.rk, p.faraday);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "x={x}: {a} vs {b}");
        }
        let (v, clamped) = redlich_kister(0.5, &p.positive.rk, 1.0, p.faraday);
        assert!(clamped && v.is_finite());
    }

    #[test]
    fn algebraic_examples() {
        let p = params();
        let mut x = p.initial_state(0.5, 0.6);
        let z = solve_algebraic(&p, &x, 1.0).unwrap();
        assert!((z.kinetics.v_o - 0.085).abs() < 1e-15);
        assert!((z.kinetics.x[0] - 0.5).abs() < 1e-15);
        let z = solve_algebraic(&p, &x, 0.0).unwrap();
        assert_eq!(z.kinetics.v_eta, [0.0, 0.0]);
        assert_eq!(z.kinetics.v_o, 0.0);
        x[0] = 2.0 * p.q_max;
        match solve_algebraic(&p, &x, 1.0) {
            Err(Error::Domain(msg)) => assert!(msg.contains("x_p"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn derivative_examples() {
        let p = params();
        let mut x = p.initial_state(0.4, 0.6);
        let kin = kinetics(&p, &x, 0.0).unwrap();
        let dx = battery_derivative(&p, &x, &kin, 0.0);
        assert!(dx[..4].iter().all(|v| v.abs() < 1e-9), "{dx:?}");
        let kin = kinetics(&p, &x, 1.0).unwrap();
        let dx = battery_derivative(&p, &x, &kin, 1.0);
        assert!((dx[4] - 0.0085).abs() < 1e-15);
        x[0] *= 1.01;
        let kin = kinetics(&p, &x, 1.0).unwrap();
        let dx = battery_derivative(&p, &x, &kin, 1.0);
        assert_eq!(dx[0] + kin.q_bs[0], 0.0);
    }

    #[test]
    fn discharge_properties() {
        let p = params();
        let cfg = DischargeConfig::default();
        let d = generate_discharge(&p, &CurrentProfile::constant(1.0, 20000.0), &cfg).unwrap();
        assert_eq!(d.stop, StopReason::Cutoff);
        assert!(d.len() > 50);
        let total0: f64 = d.states[0][..4].iter().sum();
        for (k, x) in d.states.iter().enumerate() {
            let z = solve_algebraic(&p, x, d.currents[k]).unwrap();
            for r in algebraic_residuals(&p, x, d.currents[k], &z) {
                assert!(r.abs() <= 1e-10, "step {k}: residual {r}");
            }
            let total: f64 = x[..4].iter().sum();
            assert!(((total - total0) / total0).abs() <= 1e-8);
        }
        assert!(d.voltages.last().unwrap() <= &2.7);
        assert!(d.observations_csv().starts_with("t,i_app,T,V\n0.0000000000000000e0,1.0"));
        assert_eq!(d.latent_csv().lines().count(), d.len() + 1);
    }

    #[test]
    fn zero_current_is_stationary() {
        let p = params();
        let d = generate_discharge(&p, &CurrentProfile::constant(0.0, 50.0), &DischargeConfig::default()).unwrap();
        assert_eq!(d.stop, StopReason::ProfileEnd);
        assert_eq!(d.len(), 51);
        for (x, v) in d.states.iter().zip(&d.voltages) {
            assert!((v - d.voltages[0]).abs() < 1e-12);
            for (a, b) in x.iter().zip(&d.states[0]) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ohmic_drop_scales_with_current() {
        let p = params();
        let x = p.initial_state(0.4, 0.6);
        let a = solve_algebraic(&p, &x, 1.0).unwrap().kinetics.v_o;
        let b = solve_algebraic(&p, &x, 2.0).unwrap().kinetics.v_o;
        assert!((b - 2.0 * a).abs() < 1e-15);
        let cfg = DischargeConfig::default();
        let open = generate_discharge(&p, &CurrentProfile::constant(0.0, 200.0), &cfg).unwrap();
        let loaded = generate_discharge(&p, &CurrentProfile::constant(1.0, 200.0), &cfg).unwrap();
        let k = 60.min(loaded.len() - 1);
        assert!(open.voltages[k] - loaded.voltages[k] >= 0.085 * (1.0 - (-(k as f64) / p.tau_o).exp()));
    }

    #[test]
    fn oracle_and_zero_corrections() {
        let p = params();
        let d = generate_discharge(&p, &CurrentProfile::constant(1.0, 20000.0), &DischargeConfig::default()).unwrap();
        let model = BatteryModel::init(p.clone(), SMALL_HIDDEN, 3).unwrap();
        assert_eq!(model.param_count(), 68);
        let oracle = model.predict(&d.states[0], &d.currents, d.dt, Correction::Oracle).unwrap();
        for (a, b) in oracle.iter().zip(&d.voltages) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = model.predict(&d.states[0], &d.currents, d.dt, Correction::Zero).unwrap();
        for (k, x) in d.states.iter().enumerate() {
            let z = solve_algebraic(&p, x, d.currents[k]).unwrap();
            assert!(((d.voltages[k] - zero[k]) - (z.v_int[0] - z.v_int[1])).abs() < 1e-12);
        }
        let mut euler = model.clone();
        euler.integrator = Integrator::Euler;
        let coarse = euler.predict(&d.states[0], &d.currents, d.dt, Correction::Oracle).unwrap();
        let err = coarse.iter().zip(&d.voltages).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err > 0.0 && err < 1e-2, "{err}");
    }

    #[test]
    fn battery_gradient_matches_finite_differences() {
        let p = params();
        let d = generate_discharge(&p, &CurrentProfile::constant(2.0, 60.0), &DischargeConfig::default()).unwrap();
        let mut model = BatteryModel::init(p, SMALL_HIDDEN, 5).unwrap();
        let data = [d];
        let obj = BatteryObjective::new(&mut model, &data).unwrap();
        let (_, grads) = obj.loss_and_grads().unwrap();
        let h = 1e-6;
        for (pi, ei) in [(0usize, 3usize), (1, 7), (2, 2), (5, 0), (7, 0)] {
            let mut plus = obj.model.clone();
            let mut minus = obj.model.clone();
            let bump = |m: &mut BatteryModel, d: f64| {
                let mut ps = m.positive.params_mut();
                ps.extend(m.negative.params_mut());
                ps[pi].data_mut()[ei] += d;
            };
            bump(&mut plus, h);
            bump(&mut minus, -h);
            let lp = BatteryObjective::new(&mut plus, &data).unwrap().loss_and_grads().unwrap().0;
            let lm = BatteryObjective::new(&mut minus, &data).unwrap().loss_and_grads().unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[pi].data()[ei];
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-3), "param {pi}[{ei}]: {g} vs {fd}");
        }
    }
}

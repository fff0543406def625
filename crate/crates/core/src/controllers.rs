//! Slip-tracking control laws.
//!
//! Two families share the [`SlipController`] interface:
//!
//! * a PID with filtered derivative and conditional anti-windup, whose gains
//!   come from a relay-feedback experiment and a Ziegler-Nichols style table;
//! * an adaptive torque law `w dtheta/dt = k (1/J)(lambda - lambda_ref)(theta - Tmax)(theta - Tmin)`
//!   whose state `theta` is the brake torque itself. The product
//!   `(theta - Tmax)(theta - Tmin)` vanishes at both torque bounds, so `theta`
//!   can never leave the open interval between them.

use serde::{Deserialize, Serialize};

use crate::analysis::{psi, slip_field};
use crate::error::{Error, Result};
use crate::friction::RoadSurface;
use crate::plant::{VehicleParams, V_EPS, W_EPS};

/// What a controller sees each tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    /// Measured slip (possibly noisy).
    pub slip: f64,
    /// Wheel angular speed [rad/s].
    pub wheel_speed: f64,
    /// Vehicle speed [m/s].
    pub speed: f64,
}

pub trait SlipController: Send {
    /// Commanded brake torque for this tick.
    fn step(&mut self, m: &Measurement, reference: f64, dt: f64) -> f64;

    fn reset(&mut self);

    /// Adapted torque of the barrier law, if this is one.
    fn theta(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    /// [N m per unit slip]
    pub kp: f64,
    /// [N m per unit slip per s]
    pub ki: f64,
    /// [N m s per unit slip]
    pub kd: f64,
}

impl PidGains {
    /// Derivative time `kd / kp`, zero for a controller without P action.
    pub fn derivative_time(&self) -> f64 {
        if self.kp > 0.0 {
            self.kd / self.kp
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidState {
    pub gains: PidGains,
    /// Accumulated (schedule-weighted) error.
    pub integral: f64,
    pub prev_error: Option<f64>,
    pub deriv_filter_state: f64,
    pub torque_min: f64,
    pub torque_max: f64,
    pub anti_windup: bool,
}

impl PidState {
    pub fn new(gains: PidGains, torque_min: f64, torque_max: f64) -> Self {
        Self {
            gains,
            integral: 0.0,
            prev_error: None,
            deriv_filter_state: 0.0,
            torque_min,
            torque_max,
            anti_windup: true,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
        self.deriv_filter_state = 0.0;
    }

    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        self.step_scaled(error, dt, 1.0)
    }

    /// PID step with every term multiplied by `scale` (gain scheduling). The
    /// integrator accumulates `scale * error`, so a changing schedule does not
    /// move the torque already built up in it.
    pub fn step_scaled(&mut self, error: f64, dt: f64, scale: f64) -> f64 {
        let g = self.gains;
        let raw_derivative = match self.prev_error {
            Some(prev) => (error - prev) / dt,
            None => 0.0,
        };
        self.prev_error = Some(error);
        let tf = g.derivative_time() / 10.0;
        self.deriv_filter_state += dt / (tf + dt) * (raw_derivative - self.deriv_filter_state);

        let p = scale * g.kp * error;
        let d = scale * g.kd * self.deriv_filter_state;
        let candidate = self.integral + scale * error * dt;
        let unsat = p + g.ki * candidate + d;
        let pushing_past =
            (unsat > self.torque_max && error > 0.0) || (unsat < self.torque_min && error < 0.0);
        let u = if self.anti_windup && pushing_past {
            p + g.ki * self.integral + d
        } else {
            self.integral = candidate;
            unsat
        };
        u.clamp(self.torque_min, self.torque_max)
    }
}

/// PID on slip error, optionally gain-scheduled on vehicle speed.
#[derive(Debug, Clone)]
pub struct PidSlipController {
    pub pid: PidState,
    /// Speed the gains were tuned at. The slip plant gain falls as `1/v`, so
    /// the gains are scaled by `v / tune_speed` when this is set.
    pub tune_speed: Option<f64>,
}

impl PidSlipController {
    pub fn new(gains: PidGains, torque_min: f64, torque_max: f64) -> Self {
        Self { pid: PidState::new(gains, torque_min, torque_max), tune_speed: None }
    }

    pub fn scheduled(mut self, tune_speed: f64) -> Self {
        self.tune_speed = Some(tune_speed);
        self
    }
}

impl SlipController for PidSlipController {
    fn step(&mut self, m: &Measurement, reference: f64, dt: f64) -> f64 {
        let scale = match self.tune_speed {
            Some(vt) => m.speed / vt,
            None => 1.0,
        };
        self.pid.step_scaled(reference - m.slip, dt, scale)
    }

    fn reset(&mut self) {
        self.pid.reset();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningRule {
    /// `kp = 0.6 ku, Ti = pu / 2, Td = pu / 8`
    #[default]
    ZnClassic,
    /// Pessen integral rule: `0.7 ku, pu / 2.5, 0.15 pu`
    Pessen,
    /// `0.33 ku, pu / 2, pu / 3`
    SomeOvershoot,
    /// `0.2 ku, pu / 2, pu / 3`
    NoOvershoot,
}

impl TuningRule {
    /// `(kp / ku, Ti / pu, Td / pu)`
    fn table(self) -> (f64, f64, f64) {
        match self {
            TuningRule::ZnClassic => (0.6, 0.5, 0.125),
            TuningRule::Pessen => (0.7, 0.4, 0.15),
            TuningRule::SomeOvershoot => (0.33, 0.5, 1.0 / 3.0),
            TuningRule::NoOvershoot => (0.2, 0.5, 1.0 / 3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelayExperimentResult {
    /// Ultimate gain [N m per unit slip].
    pub k_u: f64,
    /// Ultimate period [s].
    pub p_u: f64,
    /// Limit-cycle amplitude of the measured output.
    pub amplitude: f64,
    pub converged: bool,
}

pub fn zn_pid_from_relay(result: &RelayExperimentResult, rule: TuningRule) -> Result<PidGains> {
    if !result.converged {
        return Err(Error::NotConverged);
    }
    let (a, ti, td) = rule.table();
    let kp = a * result.k_u;
    let ti = ti * result.p_u;
    let td = td * result.p_u;
    Ok(PidGains { kp, ki: kp / ti, kd: kp * td })
}

/// A loop the relay experiment can drive: one input, one measured output.
pub trait RelayPlant {
    fn output(&self) -> f64;
    fn advance(&mut self, input: f64, dt: f64) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelayConfig {
    pub setpoint: f64,
    /// Input level the relay toggles around.
    pub nominal: f64,
    /// Relay half-amplitude `d`.
    pub amplitude: f64,
    pub dt: f64,
    pub max_time: f64,
    /// Consecutive periods that must agree.
    pub cycles: usize,
    pub period_tolerance: f64,
    pub amplitude_tolerance: f64,
}

impl RelayConfig {
    pub fn new(setpoint: f64, nominal: f64, amplitude: f64, dt: f64) -> Self {
        Self {
            setpoint,
            nominal,
            amplitude,
            dt,
            max_time: 10.0,
            cycles: 5,
            period_tolerance: 0.02,
            amplitude_tolerance: 0.05,
        }
    }
}

/// Largest relative deviation from the mean. A sampled relay can only switch
/// on ticks, so periods jitter by one step around the true value.
fn spread(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max) / mean.abs()
}

/// Drive `plant` with an ideal relay on `setpoint - output` until a steady
/// limit cycle appears, then read ultimate gain and period from it using the
/// describing function of the relay, `k_u = 4 d / (pi a)`.
pub fn relay_autotune(plant: &mut impl RelayPlant, cfg: &RelayConfig) -> Result<RelayExperimentResult> {
    if !(cfg.dt > 0.0 && cfg.amplitude > 0.0 && cfg.max_time > 0.0 && cfg.cycles >= 2) {
        return Err(Error::InvalidParameter(format!("bad relay configuration {cfg:?}")));
    }
    let steps = (cfg.max_time / cfg.dt).ceil() as usize;
    let mut high = cfg.setpoint - plant.output() > 0.0;
    let mut last_rise: Option<f64> = None;
    let (mut ymax, mut ymin) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut periods = Vec::new();
    let mut amplitudes = Vec::new();

    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let y = plant.output();
        ymax = ymax.max(y);
        ymin = ymin.min(y);
        let e = cfg.setpoint - y;
        if e > 0.0 && !high {
            high = true;
            if let Some(t0) = last_rise {
                periods.push(t - t0);
                amplitudes.push(0.5 * (ymax - ymin));
            }
            last_rise = Some(t);
            ymax = y;
            ymin = y;
        } else if e < 0.0 && high {
            high = false;
        }

        if periods.len() > cfg.cycles {
            // the first recorded period still carries the start-up transient
            let p = &periods[periods.len() - cfg.cycles..];
            let a = &amplitudes[amplitudes.len() - cfg.cycles..];
            if spread(p) < cfg.period_tolerance && spread(a) < cfg.amplitude_tolerance {
                let p_u = p.iter().sum::<f64>() / p.len() as f64;
                let amplitude = a.iter().sum::<f64>() / a.len() as f64;
                return Ok(RelayExperimentResult {
                    k_u: 4.0 * cfg.amplitude / (std::f64::consts::PI * amplitude),
                    p_u,
                    amplitude,
                    converged: true,
                });
            }
        }

        let u = if high { cfg.nominal + cfg.amplitude } else { cfg.nominal - cfg.amplitude };
        plant.advance(u, cfg.dt)?;
    }
    Ok(RelayExperimentResult { k_u: f64::NAN, p_u: f64::NAN, amplitude: f64::NAN, converged: false })
}

/// State of the adaptive barrier torque law.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovState {
    /// Adapted brake torque [N m].
    pub theta: f64,
    /// Adaptation gain.
    pub k_lambda: f64,
    pub torque_min: f64,
    pub torque_max: f64,
    /// Set when the last step was skipped because the wheel was locked.
    pub near_lock: bool,
}

impl LyapunovState {
    pub fn new(k_lambda: f64, torque_min: f64, torque_max: f64, theta: f64) -> Result<Self> {
        if !(k_lambda > 0.0 && k_lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("k_lambda must be finite and > 0, got {k_lambda}")));
        }
        if !(torque_min < torque_max) {
            return Err(Error::InvalidParameter(format!(
                "torque bounds must satisfy min < max, got [{torque_min}, {torque_max}]"
            )));
        }
        if !(theta > torque_min && theta < torque_max) {
            return Err(Error::OutsideBarrier { theta, min: torque_min, max: torque_max });
        }
        Ok(Self { theta, k_lambda, torque_min, torque_max, near_lock: false })
    }

    /// `dtheta/dt` for the given slip, reference and wheel speed.
    pub fn rate(&self, lambda: f64, lambda_bar: f64, w: f64, inertia: f64) -> f64 {
        self.k_lambda
            * (lambda - lambda_bar)
            * (self.theta - self.torque_max)
            * (self.theta - self.torque_min)
            / (inertia * w)
    }

    /// Advance `theta` over `dt` with slip and wheel speed held. For held
    /// inputs the law is a logistic equation, solved here in closed form:
    /// `ln((theta - Tmin)/(Tmax - theta))` moves linearly in time, so the
    /// update stays strictly between the bounds for any gain and step.
    pub fn step(&mut self, lambda: f64, lambda_bar: f64, w: f64, inertia: f64, dt: f64) -> f64 {
        if w <= W_EPS {
            self.near_lock = true;
            return self.theta;
        }
        self.near_lock = false;
        let (lo, hi) = (self.torque_min, self.torque_max);
        let c = self.k_lambda * (lambda - lambda_bar) / (inertia * w);
        let log_ratio = ((self.theta - lo) / (hi - self.theta)).ln() - c * (hi - lo) * dt;
        let next = if log_ratio > 0.0 {
            hi - (hi - lo) / (1.0 + log_ratio.exp())
        } else {
            let u = log_ratio.exp();
            lo + (hi - lo) * u / (1.0 + u)
        };
        // saturation at the float grid still has to respect the open interval
        self.theta = if next >= hi {
            hi.next_down()
        } else if next <= lo {
            lo.next_up()
        } else {
            next
        };
        self.theta
    }
}

/// The energy-like function of the barrier law,
/// `W = -lambda + (lambda_ref - 1) ln(1 - lambda) + eps(theta) + c` with
/// `eps(theta) = (tau/k) ln(Tmax - theta) - ((tau + 1)/k) ln(theta - Tmin)` and
/// `tau = (theta_ref - Tmax) / (Tmax - Tmin)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovFunction {
    pub lambda_bar: f64,
    pub theta_bar: f64,
    pub k_lambda: f64,
    pub torque_min: f64,
    pub torque_max: f64,
    pub offset: f64,
}

impl LyapunovFunction {
    /// Function with the offset chosen so that `W(lambda_bar, theta_bar) = 0`.
    pub fn centered(
        lambda_bar: f64,
        theta_bar: f64,
        k_lambda: f64,
        torque_min: f64,
        torque_max: f64,
    ) -> Result<Self> {
        let mut f = Self { lambda_bar, theta_bar, k_lambda, torque_min, torque_max, offset: 0.0 };
        f.tau()?;
        f.offset = -f.value(lambda_bar, theta_bar)?;
        Ok(f)
    }

    /// `tau`, which must lie in `(-1, 0)`, i.e. `theta_bar` strictly inside the bounds.
    pub fn tau(&self) -> Result<f64> {
        let tau = (self.theta_bar - self.torque_max) / (self.torque_max - self.torque_min);
        if tau > -1.0 && tau < 0.0 {
            Ok(tau)
        } else {
            Err(Error::OutsideBarrier { theta: self.theta_bar, min: self.torque_min, max: self.torque_max })
        }
    }

    pub fn value(&self, lambda: f64, theta: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::SlipOutOfRange(lambda));
        }
        if !(theta > self.torque_min && theta < self.torque_max) {
            return Err(Error::OutsideBarrier { theta, min: self.torque_min, max: self.torque_max });
        }
        let tau = self.tau()?;
        let k = self.k_lambda;
        let slip_part = -lambda + (self.lambda_bar - 1.0) * (1.0 - lambda).ln();
        let torque_part =
            tau / k * (self.torque_max - theta).ln() - (tau + 1.0) / k * (theta - self.torque_min).ln();
        Ok(slip_part + torque_part + self.offset)
    }

    /// `(dW/dlambda, dW/dtheta)`.
    pub fn gradient(&self, lambda: f64, theta: f64) -> Result<(f64, f64)> {
        let tau = self.tau()?;
        let k = self.k_lambda;
        let d_lambda = (lambda - self.lambda_bar) / (1.0 - lambda);
        let d_theta = -tau / (k * (self.torque_max - theta)) - (tau + 1.0) / (k * (theta - self.torque_min));
        Ok((d_lambda, d_theta))
    }
}

/// `W(lambda, theta)` for the law in `state`, reference `lambda_bar`,
/// equilibrium torque `theta_bar` and additive constant `c`.
pub fn lyapunov_value(
    lambda: f64,
    theta: f64,
    lambda_bar: f64,
    state: &LyapunovState,
    theta_bar: f64,
    c: f64,
) -> Result<f64> {
    LyapunovFunction {
        lambda_bar,
        theta_bar,
        k_lambda: state.k_lambda,
        torque_min: state.torque_min,
        torque_max: state.torque_max,
        offset: c,
    }
    .value(lambda, theta)
}

/// One sample of the continuous frozen-speed closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenLoopSample {
    pub t: f64,
    pub lambda: f64,
    pub theta: f64,
    pub w_value: f64,
}

fn logistic_torque(z: f64, lo: f64, hi: f64) -> f64 {
    if z > 0.0 {
        hi - (hi - lo) / (1.0 + z.exp())
    } else {
        let u = z.exp();
        lo + (hi - lo) * u / (1.0 + u)
    }
}

/// Integrate slip and barrier law together at constant speed `v` with an
/// ideal actuator, recording `W` along the way. The torque is carried as
/// `z = ln((theta - Tmin)/(Tmax - theta))`, in which the law is linear and
/// unbounded, and the pair `(lambda, z)` is advanced with RK4.
#[allow(clippy::too_many_arguments)]
pub fn simulate_frozen_barrier_loop(
    params: &VehicleParams,
    surface: &RoadSurface,
    v: f64,
    state: &LyapunovState,
    lambda_bar: f64,
    lambda0: f64,
    dt: f64,
    duration: f64,
) -> Result<Vec<FrozenLoopSample>> {
    if v <= V_EPS {
        return Err(Error::VehicleStopped(v));
    }
    let (lo, hi, k) = (state.torque_min, state.torque_max, state.k_lambda);
    let theta_bar = psi(lambda_bar, params, surface);
    let lyap = LyapunovFunction::centered(lambda_bar, theta_bar, k, lo, hi)?;
    let field = |lambda: f64, z: f64| {
        let theta = logistic_torque(z, lo, hi);
        let w = v * (1.0 - lambda) / params.radius;
        let dl = slip_field(lambda, theta, v, params, surface);
        let dz = -k * (lambda - lambda_bar) / (params.inertia * w) * (hi - lo);
        (dl, dz)
    };
    let mut lambda = lambda0;
    let mut z = ((state.theta - lo) / (hi - state.theta)).ln();
    let n = (duration / dt).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let theta = logistic_torque(z, lo, hi);
        out.push(FrozenLoopSample { t: i as f64 * dt, lambda, theta, w_value: lyap.value(lambda, theta)? });
        if i == n {
            break;
        }
        let (a1, b1) = field(lambda, z);
        let (a2, b2) = field(lambda + 0.5 * dt * a1, z + 0.5 * dt * b1);
        let (a3, b3) = field(lambda + 0.5 * dt * a2, z + 0.5 * dt * b2);
        let (a4, b4) = field(lambda + dt * a3, z + dt * b3);
        lambda += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        z += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        if !(lambda.is_finite() && z.is_finite() && (0.0..1.0).contains(&lambda)) {
            return Err(Error::NumericalFault {
                time: (i + 1) as f64 * dt,
                detail: format!("frozen barrier loop left the slip domain: lambda = {lambda}, z = {z}"),
            });
        }
    }
    Ok(out)
}

/// Barrier law as a [`SlipController`]; outputs `theta` directly.
#[derive(Debug, Clone)]
pub struct LyapunovSlipController {
    pub state: LyapunovState,
    pub theta_init: f64,
    pub inertia: f64,
}

impl LyapunovSlipController {
    pub fn new(
        k_lambda: f64,
        torque_min: f64,
        torque_max: f64,
        theta_init: f64,
        inertia: f64,
    ) -> Result<Self> {
        Ok(Self {
            state: LyapunovState::new(k_lambda, torque_min, torque_max, theta_init)?,
            theta_init,
            inertia,
        })
    }
}

impl SlipController for LyapunovSlipController {
    fn step(&mut self, m: &Measurement, reference: f64, dt: f64) -> f64 {
        self.state.step(m.slip, reference, m.wheel_speed, self.inertia, dt)
    }

    fn reset(&mut self) {
        self.state.theta = self.theta_init;
        self.state.near_lock = false;
    }

    fn theta(&self) -> Option<f64> {
        Some(self.state.theta)
    }
}

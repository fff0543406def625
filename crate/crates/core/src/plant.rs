//! Single-corner braking dynamics with an electromechanical brake actuator.
//!
//! ```text
//! J dw/dt = r Fx - Tb        m dv/dt = -Fx        Fx = Fz mu(lambda)
//! ```
//!
//! The actuator is a first-order lag with bandwidth `w_act` behind a pure
//! delay, discretized exactly for a zero-order-hold input. The wheel/vehicle
//! pair is advanced with classical RK4 at a fixed step.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::friction::RoadSurface;

/// Below this speed slip is not defined and a run terminates.
pub const V_EPS: f64 = 0.5;
/// Wheel speeds below this are treated as locked by the controllers.
pub const W_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "VehicleParamsFile")]
pub struct VehicleParams {
    /// Quarter-vehicle mass [kg].
    pub mass: f64,
    /// Wheel moment of inertia [kg m^2].
    pub inertia: f64,
    /// Wheel radius [m].
    pub radius: f64,
    /// Vertical tire load [N].
    pub normal_load: f64,
    /// [m/s^2]
    pub gravity: f64,
}

#[derive(Deserialize)]
#[serde(default)]
struct VehicleParamsFile {
    mass: f64,
    inertia: f64,
    radius: f64,
    normal_load: Option<f64>,
    gravity: f64,
}

impl Default for VehicleParamsFile {
    fn default() -> Self {
        let d = VehicleParams::default();
        Self { mass: d.mass, inertia: d.inertia, radius: d.radius, normal_load: None, gravity: d.gravity }
    }
}

impl From<VehicleParamsFile> for VehicleParams {
    fn from(f: VehicleParamsFile) -> Self {
        Self {
            mass: f.mass,
            inertia: f.inertia,
            radius: f.radius,
            normal_load: f.normal_load.unwrap_or(f.mass * f.gravity),
            gravity: f.gravity,
        }
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        let mass = 400.0;
        let gravity = 9.81;
        Self { mass, inertia: 1.0, radius: 0.3, normal_load: mass * gravity, gravity }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("inertia", self.inertia),
            ("radius", self.radius),
            ("normal_load", self.normal_load),
            ("gravity", self.gravity),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "vehicle {name} must be finite and > 0, got {value}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActuatorParams {
    /// Lag bandwidth [rad/s]; `inf` gives a pass-through.
    pub bandwidth: f64,
    /// Pure delay [s].
    pub delay: f64,
    pub torque_min: f64,
    pub torque_max: f64,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self { bandwidth: 70.0, delay: 0.01, torque_min: 0.0, torque_max: 1500.0 }
    }
}

impl ActuatorParams {
    /// No lag, no delay; commands are only clamped.
    pub fn ideal(torque_min: f64, torque_max: f64) -> Self {
        Self { bandwidth: f64::INFINITY, delay: 0.0, torque_min, torque_max }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "actuator bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if !(self.delay >= 0.0 && self.delay.is_finite()) {
            return Err(Error::InvalidParameter(format!("actuator delay must be >= 0, got {}", self.delay)));
        }
        if !(self.torque_min >= 0.0 && self.torque_min < self.torque_max && self.torque_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "torque bounds must satisfy 0 <= min < max, got [{}, {}]",
                self.torque_min, self.torque_max
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, torque: f64) -> f64 {
        torque.clamp(self.torque_min, self.torque_max)
    }

    /// Number of samples covered by the delay at step `dt`.
    pub fn delay_steps(&self, dt: f64) -> Result<usize> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        let ratio = self.delay / dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::MisalignedDelay { delay: self.delay, dt });
        }
        Ok(n as usize)
    }
}

/// Brake actuator: clamp, delay FIFO, exact discrete first-order lag.
#[derive(Debug, Clone)]
pub struct Actuator {
    params: ActuatorParams,
    /// `1 - exp(-w_act dt)`
    blend: f64,
    line: VecDeque<f64>,
    delay_steps: usize,
    output: f64,
}

impl Actuator {
    pub fn new(params: ActuatorParams, dt: f64, initial_torque: f64) -> Result<Self> {
        params.validate()?;
        let delay_steps = params.delay_steps(dt)?;
        let blend = 1.0 - (-params.bandwidth * dt).exp();
        let start = params.clamp(initial_torque);
        Ok(Self {
            params,
            blend,
            line: std::iter::repeat_n(start, delay_steps).collect(),
            delay_steps,
            output: start,
        })
    }

    /// Advance one sample with command `cmd`; returns the applied torque.
    pub fn step(&mut self, cmd: f64) -> f64 {
        let cmd = self.params.clamp(cmd);
        let delayed = if self.delay_steps == 0 {
            cmd
        } else {
            self.line.push_back(cmd);
            self.line.pop_front().expect("delay line is never empty here")
        };
        if self.blend == 1.0 {
            self.output = delayed;
        } else {
            self.output += self.blend * (delayed - self.output);
        }
        // convex update; the clamp only absorbs rounding
        self.output = self.params.clamp(self.output);
        self.output
    }

    pub fn output(&self) -> f64 {
        self.output
    }

    pub fn params(&self) -> &ActuatorParams {
        &self.params
    }

    pub fn delay_line_len(&self) -> usize {
        self.line.len()
    }

    pub fn reset(&mut self, torque: f64) {
        let t = self.params.clamp(torque);
        self.line.iter_mut().for_each(|x| *x = t);
        self.output = t;
    }
}

/// Continuous mechanical state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WheelState {
    /// Longitudinal speed [m/s].
    pub v: f64,
    /// Wheel angular speed [rad/s].
    pub w: f64,
    /// Distance travelled [m].
    pub distance: f64,
}

impl WheelState {
    /// State with speed `v` and braking slip `slip`.
    pub fn from_slip(v: f64, slip: f64, params: &VehicleParams) -> Self {
        Self { v, w: v * (1.0 - slip) / params.radius, distance: 0.0 }
    }
}

/// Braking slip `(v - r w) / v`, clamped to `[0, 1]`.
pub fn slip(v: f64, w: f64, params: &VehicleParams) -> Result<f64> {
    if v <= V_EPS {
        return Err(Error::VehicleStopped(v));
    }
    Ok(((v - params.radius * w) / v).clamp(0.0, 1.0))
}

/// Slip with the general `max{r w, v}` denominator; negative when the wheel
/// runs ahead of the vehicle. Used for the tire force so a released wheel
/// spins back up to rolling speed.
fn signed_slip(v: f64, w: f64, radius: f64) -> f64 {
    let rw = radius * w.max(0.0);
    let v = v.max(0.0);
    let den = rw.max(v);
    if den <= 0.0 {
        0.0
    } else {
        ((v - rw) / den).clamp(-1.0, 1.0)
    }
}

/// Friction with the law mirrored for negative slip.
fn signed_mu(surface: &RoadSurface, slip: f64) -> f64 {
    if slip >= 0.0 {
        surface.mu_unchecked(slip)
    } else {
        -surface.mu_unchecked(-slip)
    }
}

/// `(dv/dt, dw/dt)` of the free single-corner model under brake torque `tb`.
pub fn derivatives(state: &WheelState, tb: f64, params: &VehicleParams, surface: &RoadSurface) -> (f64, f64) {
    let lambda = signed_slip(state.v, state.w, params.radius);
    let fx = params.normal_load * signed_mu(surface, lambda);
    let mut dv = -fx / params.mass;
    if state.v <= 0.0 && dv < 0.0 {
        dv = 0.0;
    }
    let wheel_moment = params.radius * fx - tb;
    let dw = if state.w <= 0.0 && wheel_moment <= 0.0 {
        // locked wheel: brake holds it at zero
        0.0
    } else {
        wheel_moment / params.inertia
    };
    (dv, dw)
}

/// Slip rate of the braking model with speed treated as a parameter:
/// `dlambda/dt = -(1/v)((1 - lambda)/m + r^2/J) Fz mu(lambda) + r Tb / (v J)`.
pub fn slip_derivative(
    lambda: f64,
    v: f64,
    tb: f64,
    params: &VehicleParams,
    surface: &RoadSurface,
) -> Result<f64> {
    if v <= V_EPS {
        return Err(Error::VehicleStopped(v));
    }
    Ok(slip_rate(lambda, v, tb, params, surface))
}

#[inline]
fn slip_rate(lambda: f64, v: f64, tb: f64, p: &VehicleParams, surface: &RoadSurface) -> f64 {
    let coupling = (1.0 - lambda) / p.mass + p.radius * p.radius / p.inertia;
    -coupling * p.normal_load * signed_mu(surface, lambda) / v + p.radius * tb / (v * p.inertia)
}

/// Derivatives with `v` frozen: the wheel follows the slip equation at
/// constant speed, `dw/dt = -(v/r) dlambda/dt`.
pub fn frozen_derivatives(
    state: &WheelState,
    tb: f64,
    params: &VehicleParams,
    surface: &RoadSurface,
) -> (f64, f64) {
    if state.v <= 0.0 {
        return (0.0, 0.0);
    }
    let lambda = signed_slip(state.v, state.w, params.radius);
    let dw = -(state.v / params.radius) * slip_rate(lambda, state.v, tb, params, surface);
    if state.w <= 0.0 && dw <= 0.0 {
        (0.0, 0.0)
    } else {
        (0.0, dw)
    }
}

/// One RK4 step of `(v, w, distance)` with `tb` held over the step.
pub fn integrate_step(
    state: &WheelState,
    tb: f64,
    params: &VehicleParams,
    surface: &RoadSurface,
    dt: f64,
    frozen_v: bool,
) -> WheelState {
    let f = |s: &WheelState| {
        let (dv, dw) = if frozen_v {
            frozen_derivatives(s, tb, params, surface)
        } else {
            derivatives(s, tb, params, surface)
        };
        [dv, dw, s.v]
    };
    let at = |base: &WheelState, k: &[f64; 3], h: f64| WheelState {
        v: base.v + h * k[0],
        w: base.w + h * k[1],
        distance: base.distance + h * k[2],
    };
    let k1 = f(state);
    let k2 = f(&at(state, &k1, dt / 2.0));
    let k3 = f(&at(state, &k2, dt / 2.0));
    let k4 = f(&at(state, &k3, dt));
    let comb = |i: usize| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * dt / 6.0;
    WheelState {
        v: non_negative(state.v + comb(0)),
        w: non_negative(state.w + comb(1)),
        distance: state.distance + comb(2),
    }
}

/// Clamp at zero while letting NaN through for the fault check.
fn non_negative(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

/// Wheel, vehicle and brake actuator advanced together.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: VehicleParams,
    pub surface: RoadSurface,
    pub actuator: Actuator,
    pub state: WheelState,
    pub frozen_v: bool,
    dt: f64,
    time: f64,
}

impl Plant {
    pub fn new(
        params: VehicleParams,
        surface: RoadSurface,
        actuator: ActuatorParams,
        state: WheelState,
        dt: f64,
        frozen_v: bool,
    ) -> Result<Self> {
        params.validate()?;
        surface.validate()?;
        if !(state.v >= 0.0 && state.w >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "initial state must have v >= 0 and w >= 0, got v = {}, w = {}",
                state.v, state.w
            )));
        }
        Ok(Self {
            params,
            surface,
            actuator: Actuator::new(actuator, dt, 0.0)?,
            state,
            frozen_v,
            dt,
            time: 0.0,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn slip(&self) -> Result<f64> {
        slip(self.state.v, self.state.w, &self.params)
    }

    /// Pass `cmd` through the actuator and integrate one step under the
    /// resulting torque. Returns the applied torque.
    pub fn step(&mut self, cmd: f64) -> Result<f64> {
        let tb = self.actuator.step(cmd);
        let next = integrate_step(&self.state, tb, &self.params, &self.surface, self.dt, self.frozen_v);
        if !(next.v.is_finite() && next.w.is_finite() && next.distance.is_finite()) {
            return Err(Error::NumericalFault {
                time: self.time,
                detail: format!(
                    "non-finite state after step: before {:?}, after {:?}, torque {tb}, surface {}",
                    self.state, next, self.surface.name
                ),
            });
        }
        self.state = next;
        self.time += self.dt;
        Ok(tb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::friction::{dry_asphalt, snow, wet_asphalt};
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn normal_load_defaults_to_weight() {
        let p: VehicleParams = toml::from_str("mass = 500.0").unwrap();
        assert_eq!(p.normal_load, 500.0 * 9.81);
        let p: VehicleParams = toml::from_str("mass = 500.0\nnormal_load = 3000.0").unwrap();
        assert_eq!(p.normal_load, 3000.0);
        assert_eq!(params().normal_load, 3924.0);
    }

    #[test]
    fn slip_cases() {
        let p = params();
        assert_eq!(slip(30.0, 100.0, &p).unwrap(), 0.0);
        assert_eq!(slip(30.0, 0.0, &p).unwrap(), 1.0);
        assert!((slip(30.0, 80.0, &p).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(slip(0.3, 0.0, &p), Err(Error::VehicleStopped(_))));
    }

    #[test]
    fn coasting_has_zero_derivatives() {
        let p = params();
        let s = WheelState { v: 30.0, w: 100.0, distance: 0.0 };
        assert_eq!(derivatives(&s, 0.0, &p, &dry_asphalt()), (0.0, 0.0));
        let (dv, dw) = derivatives(&s, 600.0, &p, &dry_asphalt());
        assert_eq!(dv, 0.0);
        assert_eq!(dw, -600.0);
    }

    #[test]
    fn derivatives_match_hand_substitution() {
        // lambda = 0.2, mu from a 30-digit evaluation of the dry law
        let p = params();
        let s = WheelState { v: 30.0, w: 80.0, distance: 0.0 };
        let (dv, dw) = derivatives(&s, 1000.0, &p, &dry_asphalt());
        assert!((dv - -11.433_986_737_318_169).abs() < 1e-11);
        assert!((dw - 372.078_408_478_180_2).abs() < 1e-9);
    }

    #[test]
    fn locked_wheel_stays_locked() {
        let p = params();
        let s = WheelState { v: 20.0, w: 0.0, distance: 0.0 };
        let (_, dw) = derivatives(&s, 1500.0, &p, &dry_asphalt());
        assert_eq!(dw, 0.0);
    }

    #[test]
    fn slip_rate_zero_when_nothing_acts() {
        let p = params();
        assert_eq!(slip_derivative(0.0, 20.0, 0.0, &p, &snow()).unwrap(), 0.0);
        assert!(slip_derivative(0.1, 0.2, 0.0, &p, &snow()).is_err());
    }

    /// Slip rate from the chain rule on lambda = 1 - r w / v.
    fn chain_rule_rate(lambda: f64, v: f64, tb: f64, p: &VehicleParams, s: &RoadSurface) -> f64 {
        let w = v * (1.0 - lambda) / p.radius;
        let st = WheelState { v, w, distance: 0.0 };
        let (dv, dw) = derivatives(&st, tb, p, s);
        -p.radius / v * dw + p.radius * w / (v * v) * dv
    }

    /// The same rate written around the equilibrium torque map.
    fn torque_map_rate(lambda: f64, v: f64, tb: f64, p: &VehicleParams, s: &RoadSurface) -> f64 {
        let w = v * (1.0 - lambda) / p.radius;
        let psi = (p.radius + p.inertia * (1.0 - lambda) / (p.radius * p.mass))
            * p.normal_load
            * s.mu_unchecked(lambda);
        (lambda - 1.0) / (p.inertia * w) * (psi - tb)
    }

    #[test]
    fn slip_rate_forms_agree_at_a_point() {
        let p = params();
        let s = wet_asphalt();
        let (l, v, tb) = (0.12, 17.0, 800.0);
        let direct = slip_derivative(l, v, tb, &p, &s).unwrap();
        assert!((direct - chain_rule_rate(l, v, tb, &p, &s)).abs() < 1e-10);
        assert!((direct - torque_map_rate(l, v, tb, &p, &s)).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn slip_rate_forms_agree(l in 0.0f64..0.98, v in 1.0f64..40.0, tb in 0.0f64..1500.0) {
            let p = params();
            for s in [dry_asphalt(), wet_asphalt(), snow()] {
                let direct = slip_derivative(l, v, tb, &p, &s).unwrap();
                prop_assert!((direct - chain_rule_rate(l, v, tb, &p, &s)).abs() < 1e-10);
                prop_assert!((direct - torque_map_rate(l, v, tb, &p, &s)).abs() < 1e-10);
            }
        }

        #[test]
        fn actuator_output_stays_in_bounds(cmds in prop::collection::vec(-500.0f64..3000.0, 1..300)) {
            let a = ActuatorParams::default();
            let mut act = Actuator::new(a, 1e-3, 0.0).unwrap();
            for c in cmds {
                let out = act.step(c);
                prop_assert!(out >= a.torque_min && out <= a.torque_max);
                prop_assert_eq!(act.delay_line_len(), 10);
            }
        }

        #[test]
        fn unbraked_speed_never_increases(l0 in 0.0f64..0.9, v0 in 5.0f64..40.0) {
            let p = params();
            let s = dry_asphalt();
            let mut st = WheelState::from_slip(v0, l0, &p);
            for _ in 0..500 {
                let next = integrate_step(&st, 0.0, &p, &s, 1e-3, false);
                prop_assert!(next.v <= st.v + 1e-12);
                st = next;
            }
        }
    }

    #[test]
    fn pass_through_actuator() {
        let a = ActuatorParams::ideal(0.0, 1500.0);
        let mut act = Actuator::new(a, 1e-3, 0.0).unwrap();
        assert_eq!(act.step(700.0), 700.0);
        assert_eq!(act.step(2000.0), 1500.0);
    }

    #[test]
    fn lag_has_unit_dc_gain() {
        let a = ActuatorParams { delay: 0.0, ..Default::default() };
        let mut act = Actuator::new(a, 1e-3, 0.0).unwrap();
        let mut out = 0.0;
        for _ in 0..2000 {
            out = act.step(900.0);
        }
        assert!((out - 900.0).abs() < 1e-9);
    }

    #[test]
    fn delayed_lag_step_response_time_constant() {
        // continuous response: 1 - exp(-w (t - T)) for t > T; 63.2% at T + 1/w
        let a = ActuatorParams::default();
        let dt = 1e-3;
        let mut act = Actuator::new(a, dt, 0.0).unwrap();
        let target = 1000.0 * (1.0 - (-1.0f64).exp());
        let mut crossing = None;
        for k in 1..=200 {
            if act.step(1000.0) >= target {
                crossing = Some(k as f64 * dt);
                break;
            }
        }
        let t = crossing.unwrap();
        assert!((t - (0.01 + 1.0 / 70.0)).abs() <= dt, "crossing at {t}");
    }

    #[test]
    fn misaligned_delay_rejected() {
        let a = ActuatorParams { delay: 0.0105, ..Default::default() };
        assert!(matches!(Actuator::new(a, 1e-3, 0.0), Err(Error::MisalignedDelay { .. })));
        let a = ActuatorParams::default();
        assert_eq!(a.delay_steps(1e-3).unwrap(), 10);
        assert_eq!(a.delay_steps(5e-4).unwrap(), 20);
    }

    #[test]
    fn free_rolling_state_is_unchanged() {
        let p = params();
        let s = WheelState { v: 25.0, w: 25.0 / 0.3, distance: 0.0 };
        let next = integrate_step(&s, 0.0, &p, &dry_asphalt(), 1e-3, false);
        assert!((next.v - s.v).abs() < 1e-12);
        assert!((next.w - s.w).abs() < 1e-10);
    }

    #[test]
    fn torque_only_spins_the_wheel_down() {
        // on a frictionless road the wheel decelerates linearly
        let p = params();
        let ice = RoadSurface { name: "ice".into(), theta1: 1e-300, theta2: 1.0, theta3: 0.0 };
        let s = WheelState { v: 25.0, w: 80.0, distance: 0.0 };
        let next = integrate_step(&s, 200.0, &p, &ice, 1e-3, false);
        assert!((next.w - (80.0 - 200.0 * 1e-3)).abs() < 1e-12);
        assert_eq!(next.v, 25.0);
    }

    fn brake_run(dt: f64) -> WheelState {
        let p = params();
        let s = dry_asphalt();
        let mut st = WheelState::from_slip(30.0, 0.0, &p);
        let steps = (1.0 / dt).round() as usize;
        for _ in 0..steps {
            st = integrate_step(&st, 1200.0, &p, &s, dt, false);
        }
        st
    }

    #[test]
    fn step_halving_converges() {
        let coarse = brake_run(1e-3);
        let fine = brake_run(1e-4);
        assert!(((coarse.v - fine.v) / fine.v).abs() < 1e-4);
        assert!(((coarse.w - fine.w) / fine.w).abs() < 1e-4);
    }

    #[test]
    fn frozen_mode_holds_speed_and_follows_slip_equation() {
        let p = params();
        let s = dry_asphalt();
        let st = WheelState::from_slip(20.0, 0.1, &p);
        let (dv, dw) = frozen_derivatives(&st, 1000.0, &p, &s);
        assert_eq!(dv, 0.0);
        let rate = slip_derivative(0.1, 20.0, 1000.0, &p, &s).unwrap();
        assert!((dw + 20.0 / 0.3 * rate).abs() < 1e-9);
    }

    #[test]
    fn plant_reports_nonfinite_state() {
        let p = params();
        let mut plant = Plant::new(
            p,
            dry_asphalt(),
            ActuatorParams::default(),
            WheelState::from_slip(20.0, 0.0, &p),
            1e-3,
            false,
        )
        .unwrap();
        plant.state.w = f64::NAN;
        assert!(matches!(plant.step(100.0), Err(Error::NumericalFault { .. })));
    }
}

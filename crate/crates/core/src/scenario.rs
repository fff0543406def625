//! Declarative closed-loop braking experiments.
//!
//! A [`ScenarioConfig`] (usually read from TOML) names the vehicle, actuator,
//! surface timeline, controller and timed events. [`run`] executes the fixed
//! step loop
//!
//! ```text
//! sense (+ noise) -> road weights -> controller(s) -> blend -> actuator -> RK4 -> record
//! ```
//!
//! and returns the sampled [`Trace`] with summary [`Metrics`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::psi;
use crate::controllers::{
    relay_autotune, zn_pid_from_relay, LyapunovFunction, LyapunovSlipController, Measurement, PidGains,
    PidSlipController, RelayConfig, RelayExperimentResult, RelayPlant, SlipController, TuningRule,
};
use crate::error::{Error, Result};
use crate::friction::{RoadSurface, SurfaceSet};
use crate::fuzzy::{BlendedController, MembershipBank, MembershipFunction};
use crate::plant::{slip, ActuatorParams, Plant, VehicleParams, WheelState, V_EPS};

/// Slack for "first tick with t >= event time" against float drift in `k * dt`.
const TICK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceValue {
    Slip(f64),
    /// `"optimal"`: the controller's own optimal-slip target.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    ReferenceStep {
        time: f64,
        value: ReferenceValue,
    },
    /// Additive torque on the brake command [N m] for `duration` seconds.
    TorqueDisturbance {
        time: f64,
        value: f64,
        duration: f64,
    },
    SurfaceSwitch {
        time: f64,
        surface: String,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::ReferenceStep { time, .. }
            | Event::TorqueDisturbance { time, .. }
            | Event::SurfaceSwitch { time, .. } => *time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSegment {
    pub time: f64,
    pub surface: String,
}

/// Source of the optimal-slip estimate fed to the road weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaOptSignal {
    /// `"truth"`: the active surface's exact optimal slip.
    Mode(String),
    /// `[[t0, value0], [t1, value1], ...]`, held between breakpoints.
    Schedule(Vec<[f64; 2]>),
}

impl Default for LambdaOptSignal {
    fn default() -> Self {
        LambdaOptSignal::Mode("truth".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Pid,
    #[default]
    Lyapunov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    pub rule: TuningRule,
    /// Explicit gains; skips the relay experiment when set.
    pub gains: Option<PidGains>,
    /// Relay half-amplitude as a fraction of the torque upper bound.
    pub relay_fraction: f64,
    /// Speed for the relay experiment; defaults to the initial speed.
    pub tune_speed: Option<f64>,
    /// Scale the gains with `v / tune_speed`.
    pub schedule: bool,
    pub anti_windup: bool,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            rule: TuningRule::ZnClassic,
            gains: None,
            relay_fraction: 0.05,
            tune_speed: None,
            schedule: true,
            anti_windup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaInit {
    Torque(f64),
    /// `"midpoint"` of the torque bounds or `"equilibrium"` torque at the target slip.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovConfig {
    pub k_lambda: f64,
    pub theta_init: ThetaInit,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self { k_lambda: 3.0, theta_init: ThetaInit::Named("midpoint".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Design surface of a single controller; defaults to the road at t = 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
    /// Run one controller per fuzzy-bank surface and blend them.
    pub blend: bool,
    pub pid: PidConfig,
    pub lyapunov: LyapunovConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipEntry {
    pub surface: String,
    #[serde(flatten)]
    pub function: MembershipFunction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzyConfig {
    /// Surfaces in the bank; empty means every known surface.
    pub surfaces: Vec<String>,
    /// Explicit membership functions; default is centered at each optimal slip.
    pub memberships: Vec<MembershipEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub slip_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Metrics ignore everything after the vehicle drops below this speed.
    pub min_speed: f64,
    /// Error band for settling and recovery.
    pub band: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { min_speed: 5.0, band: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub vehicle: VehicleParams,
    pub actuator: ActuatorParams,
    pub initial_speed: f64,
    pub initial_slip: f64,
    pub duration: f64,
    pub dt: f64,
    /// Hold vehicle speed constant.
    pub frozen_v: bool,
    /// Extra surfaces on top of the dry/wet/snow presets.
    pub surfaces: Vec<RoadSurface>,
    pub surface_timeline: Vec<SurfaceSegment>,
    pub lambda_opt_signal: LambdaOptSignal,
    pub events: Vec<Event>,
    pub controller: ControllerConfig,
    pub fuzzy: FuzzyConfig,
    pub noise: NoiseConfig,
    pub metrics: MetricsConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            vehicle: VehicleParams::default(),
            actuator: ActuatorParams::default(),
            initial_speed: 30.0,
            initial_slip: 0.0,
            duration: 20.0,
            dt: 1e-3,
            frozen_v: false,
            surfaces: Vec::new(),
            surface_timeline: vec![SurfaceSegment { time: 0.0, surface: "dry".into() }],
            lambda_opt_signal: LambdaOptSignal::default(),
            events: Vec::new(),
            controller: ControllerConfig::default(),
            fuzzy: FuzzyConfig::default(),
            noise: NoiseConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The reference protocol: brake released until a step to the optimal
    /// slip at 1 s, then a 100 N m torque pulse of 0.2 s at 2 s. The barrier
    /// law starts from the equilibrium torque of its design surface.
    pub fn protocol(surface: &str, initial_speed: f64, kind: ControllerKind) -> Self {
        Self {
            name: format!("protocol-{surface}-{initial_speed}-{kind:?}").to_lowercase(),
            initial_speed,
            surface_timeline: vec![SurfaceSegment { time: 0.0, surface: surface.into() }],
            events: vec![
                Event::ReferenceStep { time: 1.0, value: ReferenceValue::Named("optimal".into()) },
                Event::TorqueDisturbance { time: 2.0, value: 100.0, duration: 0.2 },
            ],
            controller: ControllerConfig {
                kind,
                // a midpoint start sits above the peak equilibrium torque on
                // low-friction roads and locks the wheel on the first tick
                lyapunov: LyapunovConfig {
                    theta_init: ThetaInit::Named("equilibrium".into()),
                    ..LyapunovConfig::default()
                },
                ..ControllerConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn surface_set(&self) -> Result<SurfaceSet> {
        let mut all: Vec<RoadSurface> = SurfaceSet::presets()
            .iter()
            .filter(|p| !self.surfaces.iter().any(|s| s.name == p.name))
            .cloned()
            .collect();
        all.extend(self.surfaces.iter().cloned());
        SurfaceSet::from_surfaces(all)
    }

    /// Surface a single controller is designed for.
    pub fn design_surface(&self) -> &str {
        match (&self.controller.surface, self.surface_timeline.first()) {
            (Some(s), _) => s,
            (None, Some(seg)) => &seg.surface,
            (None, None) => "dry",
        }
    }

    /// The surfaces taking part in blending and their membership bank.
    pub fn membership_bank(&self) -> Result<(SurfaceSet, MembershipBank)> {
        let surfaces = self.surface_set()?;
        let names: Vec<String> = if self.fuzzy.surfaces.is_empty() {
            surfaces.names().iter().map(|s| s.to_string()).collect()
        } else {
            self.fuzzy.surfaces.clone()
        };
        let subset = SurfaceSet::from_surfaces(
            names.iter().map(|n| surfaces.get(n).cloned()).collect::<Result<_>>()?,
        )?;
        let bank = if self.fuzzy.memberships.is_empty() {
            MembershipBank::from_surfaces(&subset)?
        } else {
            MembershipBank::new(
                self.fuzzy.memberships.iter().map(|m| m.surface.clone()).collect(),
                self.fuzzy.memberships.iter().map(|m| m.function).collect(),
            )?
        };
        Ok((subset, bank))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be > 0, got {}", self.duration));
        }
        if !(self.initial_speed >= 0.0 && self.initial_speed.is_finite()) {
            return bad(format!("initial_speed must be >= 0, got {}", self.initial_speed));
        }
        if !(0.0..=1.0).contains(&self.initial_slip) {
            return bad(format!("initial_slip must lie in [0, 1], got {}", self.initial_slip));
        }
        self.vehicle.validate()?;
        self.actuator.validate()?;
        self.actuator.delay_steps(self.dt)?;
        let surfaces = self.surface_set()?;
        match self.surface_timeline.first() {
            Some(s) if s.time == 0.0 => {}
            _ => return bad("surface_timeline must start at t = 0".into()),
        }
        for w in self.surface_timeline.windows(2) {
            if !(w[1].time > w[0].time) {
                return bad("surface_timeline times must increase".into());
            }
        }
        for s in &self.surface_timeline {
            surfaces.get(&s.surface)?;
        }
        for e in &self.events {
            let t = e.time();
            if !(0.0..=self.duration).contains(&t) {
                return bad(format!("event time {t} outside [0, {}]", self.duration));
            }
            match e {
                Event::ReferenceStep { value: ReferenceValue::Slip(x), .. } if !(0.0..1.0).contains(x) => {
                    return Err(Error::SlipOutOfRange(*x));
                }
                Event::ReferenceStep { value: ReferenceValue::Named(n), .. } if n != "optimal" => {
                    return bad(format!("unknown reference `{n}`, expected a slip or \"optimal\""));
                }
                Event::TorqueDisturbance { value, duration, .. }
                    if !(value.is_finite() && *duration >= 0.0) =>
                {
                    return bad("torque disturbance needs a finite value and duration >= 0".into());
                }
                Event::SurfaceSwitch { surface, .. } => {
                    surfaces.get(surface)?;
                }
                _ => {}
            }
        }
        match &self.lambda_opt_signal {
            LambdaOptSignal::Mode(m) if m != "truth" => {
                return bad(format!("unknown lambda_opt_signal `{m}`, expected \"truth\" or a schedule"));
            }
            LambdaOptSignal::Schedule(points) => {
                if points.first().map(|p| p[0]) != Some(0.0) {
                    return bad("lambda_opt_signal schedule must start at t = 0".into());
                }
                if points.iter().any(|p| !(0.0..=1.0).contains(&p[1])) {
                    return bad("lambda_opt_signal values must lie in [0, 1]".into());
                }
            }
            _ => {}
        }
        if !(self.noise.slip_sigma >= 0.0 && self.noise.slip_sigma.is_finite()) {
            return bad(format!("noise.slip_sigma must be >= 0, got {}", self.noise.slip_sigma));
        }
        if !self.controller.blend {
            surfaces.get(self.design_surface())?;
        }
        Ok(())
    }
}

/// Frozen-speed slip loop driven by the relay experiment.
pub struct SlipRelayPlant {
    pub plant: Plant,
}

impl RelayPlant for SlipRelayPlant {
    fn output(&self) -> f64 {
        self.plant.slip().unwrap_or(f64::NAN)
    }

    fn advance(&mut self, input: f64, _dt: f64) -> Result<()> {
        self.plant.step(input).map(|_| ())
    }
}

/// Relay experiment about `lambda_bar` at constant speed `v`, relay size
/// `fraction` of the actuator's upper torque bound.
pub fn slip_relay_experiment(
    params: &VehicleParams,
    actuator: &ActuatorParams,
    surface: &RoadSurface,
    lambda_bar: f64,
    v: f64,
    fraction: f64,
    dt: f64,
) -> Result<RelayExperimentResult> {
    let nominal = psi(lambda_bar, params, surface);
    let state = WheelState::from_slip(v, lambda_bar, params);
    let mut plant = Plant::new(*params, surface.clone(), *actuator, state, dt, true)?;
    plant.actuator.reset(nominal);
    let cfg = RelayConfig::new(lambda_bar, nominal, fraction * actuator.torque_max, dt);
    relay_autotune(&mut SlipRelayPlant { plant }, &cfg)
}

/// What the engine worked out while building controllers, kept for manifests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedController {
    pub surface: String,
    pub lambda_opt: f64,
    pub relay: Option<RelayExperimentResult>,
    pub pid_gains: Option<PidGains>,
    pub theta_init: Option<f64>,
}

fn build_controller(
    cfg: &ScenarioConfig,
    surface: &RoadSurface,
) -> Result<(Box<dyn SlipController>, ResolvedController)> {
    let c = &cfg.controller;
    let lambda_opt = surface.optimal_slip()?.slip;
    let act = &cfg.actuator;
    let mut resolved = ResolvedController {
        surface: surface.name.clone(),
        lambda_opt,
        relay: None,
        pid_gains: None,
        theta_init: None,
    };
    let ctrl: Box<dyn SlipController> = match c.kind {
        ControllerKind::Pid => {
            let tune_speed = c.pid.tune_speed.unwrap_or(cfg.initial_speed);
            let gains = match c.pid.gains {
                Some(g) => g,
                None => {
                    let relay = slip_relay_experiment(
                        &cfg.vehicle,
                        act,
                        surface,
                        lambda_opt,
                        tune_speed,
                        c.pid.relay_fraction,
                        cfg.dt,
                    )?;
                    resolved.relay = Some(relay);
                    zn_pid_from_relay(&relay, c.pid.rule)?
                }
            };
            resolved.pid_gains = Some(gains);
            let mut pid = PidSlipController::new(gains, act.torque_min, act.torque_max);
            pid.pid.anti_windup = c.pid.anti_windup;
            if c.pid.schedule {
                pid = pid.scheduled(tune_speed);
            }
            Box::new(pid)
        }
        ControllerKind::Lyapunov => {
            let (lo, hi) = (act.torque_min, act.torque_max);
            let theta = match &c.lyapunov.theta_init {
                ThetaInit::Torque(t) => *t,
                ThetaInit::Named(n) if n == "midpoint" => 0.5 * (lo + hi),
                ThetaInit::Named(n) if n == "equilibrium" => {
                    // keep a margin off the barrier for surfaces that peak above Tmax
                    psi(lambda_opt, &cfg.vehicle, surface).clamp(lo + 1e-3 * (hi - lo), hi - 1e-3 * (hi - lo))
                }
                ThetaInit::Named(n) => {
                    return Err(Error::Config(format!(
                        "unknown theta_init `{n}`, expected a torque, \"midpoint\" or \"equilibrium\""
                    )))
                }
            };
            resolved.theta_init = Some(theta);
            Box::new(LyapunovSlipController::new(c.lyapunov.k_lambda, lo, hi, theta, cfg.vehicle.inertia)?)
        }
    };
    Ok((ctrl, resolved))
}

enum Control {
    Single { ctrl: Box<dyn SlipController>, lambda_opt: f64 },
    Blend(BlendedController),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub v: f64,
    pub w: f64,
    pub lambda: f64,
    /// NaN before the reference step.
    pub lambda_ref: f64,
    pub mu: f64,
    pub tb_cmd: f64,
    pub tb_applied: f64,
    pub weights: Vec<f64>,
    pub w_lyap: Option<f64>,
    /// Optimal slip of the surface under the wheel (not written to CSV).
    pub lambda_opt_true: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub weight_labels: Vec<String>,
    pub has_lyapunov: bool,
    pub rows: Vec<TraceRow>,
    /// Final integrator state, including the distance covered.
    pub final_state: WheelState,
    /// Time at which the vehicle dropped below the stopping speed, if it did.
    pub stop_time: Option<f64>,
    /// `(start, end)` of every torque disturbance.
    pub disturbances: Vec<(f64, f64)>,
    pub reference_time: Option<f64>,
}

impl Trace {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["t", "v", "w", "lambda", "lambda_ref", "mu", "Tb_cmd", "Tb_applied"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.weight_labels.iter().map(|l| format!("w_{l}")));
        if self.has_lyapunov {
            h.push("W_lyap".into());
        }
        h
    }

    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        let mut line = String::new();
        for r in &self.rows {
            line.clear();
            let _ = write!(
                line,
                "{},{},{},{},{},{},{},{}",
                r.t, r.v, r.w, r.lambda, r.lambda_ref, r.mu, r.tb_cmd, r.tb_applied
            );
            for w in &r.weights {
                let _ = write!(line, ",{w}");
            }
            if self.has_lyapunov {
                match r.w_lyap {
                    Some(x) => {
                        let _ = write!(line, ",{x}");
                    }
                    None => line.push(','),
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Integral of `|lambda - lambda_ref|` over the evaluation window [s].
    pub iae: f64,
    /// Same against the true optimal slip of the active surface.
    pub iae_opt: f64,
    /// Time after the reference step until the error stays inside the band.
    pub settle_time: Option<f64>,
    pub overshoot: f64,
    /// Time after the end of the first disturbance until the error stays inside
    /// the band again. `None` when no disturbance ends inside the window or
    /// the error never returns.
    pub recovery_time: Option<f64>,
    pub disturbance_in_window: bool,
    /// Largest `|lambda - lambda_ref|` after the error first enters the band.
    pub max_error_after_capture: Option<f64>,
    pub stop_distance: f64,
    pub stop_time: Option<f64>,
    pub stopped: bool,
    pub cmd_variance: f64,
    /// End of the evaluation window [s].
    pub window_end: f64,
}

impl Metrics {
    pub const HEADER: &'static str = "iae,iae_opt,settle_time,overshoot,recovery_time,disturbance_in_window,max_error_after_capture,stop_distance,stop_time,stopped,cmd_variance,window_end";

    pub fn csv_row(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iae,
            self.iae_opt,
            o(self.settle_time),
            self.overshoot,
            o(self.recovery_time),
            self.disturbance_in_window,
            o(self.max_error_after_capture),
            self.stop_distance,
            o(self.stop_time),
            self.stopped,
            self.cmd_variance,
            self.window_end
        )
    }

    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        writeln!(out, "{}", self.csv_row())
    }

    pub fn summary(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        format!(
            "IAE {:.5} (vs optimum {:.5}), settle {} s, overshoot {:.4}, recovery {} s, \
             stop {} s after {:.2} m, command variance {:.1} N^2 m^2",
            self.iae,
            self.iae_opt,
            o(self.settle_time),
            self.overshoot,
            o(self.recovery_time),
            o(self.stop_time),
            self.stop_distance,
            self.cmd_variance
        )
    }
}

/// First index from which `pred` holds for every row up to `end` (exclusive).
fn sustained_from(
    rows: &[TraceRow],
    start: usize,
    end: usize,
    pred: impl Fn(&TraceRow) -> bool,
) -> Option<usize> {
    if start >= end {
        return None;
    }
    let mut first = None;
    for (i, r) in rows.iter().enumerate().take(end).skip(start) {
        if pred(r) {
            first.get_or_insert(i);
        } else {
            first = None;
        }
    }
    first
}

pub fn compute_metrics(trace: &Trace, cfg: &MetricsConfig) -> Metrics {
    let rows = &trace.rows;
    let dt = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.0 };
    let start = rows.iter().position(|r| !r.lambda_ref.is_nan()).unwrap_or(rows.len());
    let end = rows.iter().position(|r| r.v < cfg.min_speed).unwrap_or(rows.len()).max(start);
    let window = &rows[start..end];
    let err = |r: &TraceRow| (r.lambda - r.lambda_ref).abs();
    let in_band = |r: &TraceRow| err(r) < cfg.band;

    let iae = window.iter().map(|r| err(r) * dt).sum();
    let iae_opt = window.iter().map(|r| (r.lambda - r.lambda_opt_true).abs() * dt).sum();
    let overshoot = window.iter().map(|r| r.lambda - r.lambda_ref).fold(0.0, f64::max);
    let t_of = |i: usize| rows[i].t;

    let first_dist = trace
        .disturbances
        .iter()
        .filter(|(s, _)| trace.reference_time.is_some_and(|tr| *s >= tr))
        .cloned()
        .next();
    let dist_start_idx = first_dist.map(|(s, _)| rows.partition_point(|r| r.t < s - TICK_SLACK));
    let settle_end = dist_start_idx.map_or(end, |i| i.min(end));
    let settle_time = sustained_from(rows, start, settle_end, in_band).map(|i| t_of(i) - t_of(start));

    let disturbance_in_window = first_dist.is_some_and(|(_, e)| {
        end < rows.len() && e < rows[end].t || end == rows.len() && e <= rows.last().map_or(0.0, |r| r.t)
    });
    let recovery_time = match first_dist {
        Some((_, e)) if disturbance_in_window => {
            let after = rows.partition_point(|r| r.t < e - TICK_SLACK);
            sustained_from(rows, after, end, in_band).map(|i| t_of(i) - e)
        }
        _ => None,
    };
    let max_error_after_capture =
        window.iter().position(in_band).map(|i| window[i..].iter().map(err).fold(0.0, f64::max));

    let cmds: Vec<f64> = window.iter().map(|r| r.tb_cmd).collect();
    let cmd_variance = if cmds.is_empty() {
        0.0
    } else {
        let mean = cmds.iter().sum::<f64>() / cmds.len() as f64;
        cmds.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / cmds.len() as f64
    };

    Metrics {
        iae,
        iae_opt,
        settle_time,
        overshoot,
        recovery_time,
        disturbance_in_window,
        max_error_after_capture,
        stop_distance: trace.final_state.distance,
        stop_time: trace.stop_time,
        stopped: trace.stop_time.is_some(),
        cmd_variance,
        window_end: if end < rows.len() { rows[end].t } else { rows.last().map_or(0.0, |r| r.t) },
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: Metrics,
    pub controllers: Vec<ResolvedController>,
}

/// A failed run with whatever was recorded before the failure.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub error: Error,
    pub trace: Option<Box<Trace>>,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self { error, trace: None }
    }
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

fn lambda_opt_at(signal: &LambdaOptSignal, t: f64, truth: f64) -> f64 {
    match signal {
        LambdaOptSignal::Mode(_) => truth,
        LambdaOptSignal::Schedule(points) => {
            let i = points.partition_point(|p| p[0] <= t + TICK_SLACK);
            points[i.saturating_sub(1)][1]
        }
    }
}

/// Run one scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> std::result::Result<RunOutput, RunFailure> {
    cfg.validate()?;
    let surfaces = cfg.surface_set()?;
    let p = &cfg.vehicle;
    let dt = cfg.dt;

    let mut resolved = Vec::new();
    let mut control = if cfg.controller.blend {
        let (subset, bank) = cfg.membership_bank()?;
        let mut ctrls = Vec::new();
        let mut opts = Vec::new();
        for label in &bank.labels {
            let s = subset.get(label)?;
            let (c, r) = build_controller(cfg, s)?;
            opts.push(r.lambda_opt);
            ctrls.push(c);
            resolved.push(r);
        }
        Control::Blend(BlendedController::new(bank, opts, ctrls)?)
    } else {
        let s = surfaces.get(cfg.design_surface())?;
        let (ctrl, r) = build_controller(cfg, s)?;
        let lambda_opt = r.lambda_opt;
        resolved.push(r);
        Control::Single { ctrl, lambda_opt }
    };
    let weight_labels = match &control {
        Control::Blend(b) => b.bank.labels.clone(),
        Control::Single { .. } => Vec::new(),
    };
    let has_lyapunov = !cfg.controller.blend && cfg.controller.kind == ControllerKind::Lyapunov;
    let k_lambda = cfg.controller.lyapunov.k_lambda;

    let mut surface = surfaces.get(&cfg.surface_timeline[0].surface)?.clone();
    let state = WheelState::from_slip(cfg.initial_speed, cfg.initial_slip, p);
    let mut plant = Plant::new(*p, surface.clone(), cfg.actuator, state, dt, cfg.frozen_v)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
    let noise = if cfg.noise.slip_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise.slip_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?)
    } else {
        None
    };

    // surface timeline entries become switch events
    let mut events: Vec<Event> = cfg.events.clone();
    events.extend(
        cfg.surface_timeline
            .iter()
            .skip(1)
            .map(|s| Event::SurfaceSwitch { time: s.time, surface: s.surface.clone() }),
    );
    events.sort_by(|a, b| a.time().total_cmp(&b.time()));
    let disturbances: Vec<(f64, f64)> = events
        .iter()
        .filter_map(|e| match e {
            Event::TorqueDisturbance { time, duration, .. } => Some((*time, time + duration)),
            _ => None,
        })
        .collect();
    let mut next_event = 0;
    let mut reference: Option<ReferenceValue> = None;
    let mut active_disturbances: Vec<(f64, f64)> = Vec::new();

    let n_steps = (cfg.duration / dt).round() as usize;
    let mut trace = Trace {
        weight_labels,
        has_lyapunov,
        rows: Vec::with_capacity(n_steps + 1),
        final_state: plant.state,
        stop_time: None,
        disturbances,
        reference_time: None,
    };

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        while next_event < events.len() && events[next_event].time() <= t + TICK_SLACK * dt {
            match &events[next_event] {
                Event::ReferenceStep { value, .. } => {
                    if reference.is_none() {
                        trace.reference_time = Some(t);
                        match &mut control {
                            Control::Single { ctrl, .. } => ctrl.reset(),
                            Control::Blend(b) => b.reset(),
                        }
                    }
                    reference = Some(value.clone());
                }
                Event::TorqueDisturbance { value, duration, .. } => {
                    active_disturbances.push((t + duration, *value));
                }
                Event::SurfaceSwitch { surface: name, .. } => {
                    surface = surfaces.get(name)?.clone();
                    plant.surface = surface.clone();
                }
            }
            next_event += 1;
        }

        let v = plant.state.v;
        if v <= V_EPS {
            trace.stop_time = Some(t);
            break;
        }
        let lambda = match slip(v, plant.state.w, p) {
            Ok(l) => l,
            Err(error) => return Err(RunFailure { error, trace: Some(Box::new(trace)) }),
        };
        let measured = match &noise {
            Some(n) => (lambda + n.sample(&mut rng)).clamp(0.0, 1.0),
            None => lambda,
        };
        let m = Measurement { slip: measured, wheel_speed: plant.state.w, speed: v };
        let lambda_opt_true = surface.optimal_slip()?.slip;
        let estimate = lambda_opt_at(&cfg.lambda_opt_signal, t, lambda_opt_true);

        let (weights, scheduled_ref) = match &control {
            Control::Blend(b) => {
                let (w, r) = b.schedule(estimate)?;
                (Some(w), r)
            }
            Control::Single { lambda_opt, .. } => (None, *lambda_opt),
        };
        let lambda_ref = match &reference {
            None => f64::NAN,
            Some(ReferenceValue::Slip(x)) => *x,
            Some(ReferenceValue::Named(_)) => scheduled_ref,
        };

        let cmd = if reference.is_some() {
            match &mut control {
                Control::Single { ctrl, .. } => ctrl.step(&m, lambda_ref, dt),
                Control::Blend(b) => {
                    b.step(&m, weights.as_ref().expect("blend has weights"), lambda_ref, dt)?
                }
            }
        } else {
            0.0
        };
        active_disturbances.retain(|(until, _)| t < until - TICK_SLACK * dt);
        let disturbance: f64 = active_disturbances.iter().map(|(_, d)| d).sum();

        let w_lyap = match (&control, has_lyapunov && reference.is_some()) {
            (Control::Single { ctrl, .. }, true) => ctrl.theta().and_then(|theta| {
                let theta_bar = psi(lambda_ref, p, &surface);
                let a = &cfg.actuator;
                LyapunovFunction::centered(lambda_ref, theta_bar, k_lambda, a.torque_min, a.torque_max)
                    .and_then(|f| f.value(lambda, theta))
                    .ok()
            }),
            _ => None,
        };

        let mut row = TraceRow {
            t,
            v,
            w: plant.state.w,
            lambda,
            lambda_ref,
            mu: surface.mu_unchecked(lambda),
            tb_cmd: cmd,
            tb_applied: f64::NAN,
            weights: weights.map(|w| w.values().collect()).unwrap_or_default(),
            w_lyap,
            lambda_opt_true,
        };
        if k == n_steps {
            row.tb_applied = plant.actuator.output();
            trace.rows.push(row);
            break;
        }
        match plant.step(cmd + disturbance) {
            Ok(tb) => {
                row.tb_applied = tb;
                trace.rows.push(row);
            }
            Err(error) => {
                trace.rows.push(row);
                trace.final_state = plant.state;
                return Err(RunFailure { error, trace: Some(Box::new(trace)) });
            }
        }
    }
    trace.final_state = plant.state;
    let metrics = compute_metrics(&trace, &cfg.metrics);
    Ok(RunOutput { trace, metrics, controllers: resolved })
}

/// Run independent scenarios in parallel; results keep the input order.
pub fn batch(configs: &[ScenarioConfig]) -> Vec<std::result::Result<RunOutput, RunFailure>> {
    configs.par_iter().map(run).collect()
}

/// A base scenario and a set of parameters to sweep over. Keys are dotted
/// paths into the scenario table, e.g. `controller.kind` or `initial_speed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ScenarioConfig,
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Cartesian product of the sweep; keys in sorted order, the first varying slowest.
    pub fn expand(&self) -> Result<Vec<ScenarioConfig>> {
        let base = toml::Value::try_from(&self.base).map_err(|e| Error::Config(e.to_string()))?;
        let mut combos: Vec<Vec<(&str, &toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.sweep {
            if values.is_empty() {
                return Err(Error::Config(format!("sweep key `{key}` has no values")));
            }
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.as_str(), v));
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .enumerate()
            .map(|(i, combo)| {
                let mut doc = base.clone();
                let mut label = Vec::new();
                for (path, value) in combo {
                    set_path(&mut doc, path, value.clone())?;
                    label.push(format!("{path}={value}"));
                }
                let mut cfg: ScenarioConfig =
                    doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
                cfg.name = if label.is_empty() {
                    format!("{}-{i}", self.base.name)
                } else {
                    format!("{}-{i}[{}]", self.base.name, label.join(","))
                };
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("sweep path `{path}` does not name a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config("empty sweep path".into()))
}

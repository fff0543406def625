//! Equilibria of the autonomous slip equation and its linearization.
//!
//! With speed treated as a parameter the slip obeys
//! `dlambda/dt = (r / (J v)) (Tb - psi(lambda))`, where
//! `psi(lambda) = (r + J (1 - lambda) / (r m)) Fz mu(lambda)` is the brake
//! torque that holds slip `lambda` stationary. For a torque below the peak of
//! `psi` and above `psi(1)` there are two equilibria: a stable one on the
//! rising branch and an unstable one past the peak.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::friction::RoadSurface;
use crate::plant::{VehicleParams, V_EPS};

const SCAN_STEP: f64 = 1e-3;
const BISECT_TOL: f64 = 1e-10;
const CLASSIFY_STEP: f64 = 1e-6;

/// Equilibrium brake torque for slip `lambda`.
pub fn psi(lambda: f64, params: &VehicleParams, surface: &RoadSurface) -> f64 {
    let lever = params.radius + params.inertia * (1.0 - lambda) / (params.radius * params.mass);
    lever * params.normal_load * surface.mu_unchecked(lambda)
}

/// Location and value of the maximum of `psi` on `[0, 1]`.
pub fn psi_peak(params: &VehicleParams, surface: &RoadSurface) -> (f64, f64) {
    let f = |l: f64| psi(l, params, surface);
    let n = (1.0 / SCAN_STEP).round() as usize;
    let mut best = 0;
    for k in 1..=n {
        if f(k as f64 * SCAN_STEP) > f(best as f64 * SCAN_STEP) {
            best = k;
        }
    }
    // golden-section refinement inside the bracketing cells
    let mut a = (best as f64 - 1.0).max(0.0) * SCAN_STEP;
    let mut b = ((best + 1) as f64 * SCAN_STEP).min(1.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-12 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) >= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let l = 0.5 * (a + b);
    (l, f(l))
}

/// Slip field written around `psi`, with the wheel speed expressed through
/// the slip at vehicle speed `v`: `((lambda - 1) / (J w)) (psi - Tb)`.
pub fn slip_field(lambda: f64, tb: f64, v: f64, params: &VehicleParams, surface: &RoadSurface) -> f64 {
    let w = v * (1.0 - lambda) / params.radius;
    (lambda - 1.0) / (params.inertia * w) * (psi(lambda, params, surface) - tb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    LocallyAsymptoticallyStable,
    Unstable,
}

impl Stability {
    pub fn label(self) -> &'static str {
        match self {
            Stability::LocallyAsymptoticallyStable => "stable",
            Stability::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Equilibrium {
    pub lambda_eq: f64,
    pub stability: Stability,
    /// Brake torque at which this slip is stationary.
    pub torque: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSet {
    /// Sorted by increasing slip.
    pub equilibria: Vec<Equilibrium>,
    /// No equilibrium exists: the torque exceeds the peak of `psi`.
    pub wheel_lock: bool,
}

/// All slips in `[0, 1)` where `psi(lambda) = tb`, each classified by the
/// sign of the slope of the slip field there.
pub fn find_equilibria(tb: f64, params: &VehicleParams, surface: &RoadSurface) -> Result<EquilibriumSet> {
    if !(tb >= 0.0) {
        return Err(Error::InvalidParameter(format!("equilibrium torque must be >= 0, got {tb}")));
    }
    let g = |l: f64| psi(l, params, surface) - tb;
    let n = (1.0 / SCAN_STEP).round() as usize;
    let mut roots = Vec::new();
    let mut prev = (0.0, g(0.0));
    if prev.1 == 0.0 {
        roots.push(0.0);
    }
    for k in 1..=n {
        let l = k as f64 * SCAN_STEP;
        let cur = (l, g(l));
        if cur.1 == 0.0 {
            if l < 1.0 {
                roots.push(l);
            }
        } else if prev.1 != 0.0 && (prev.1 < 0.0) != (cur.1 < 0.0) {
            let root = bisect(&g, prev.0, cur.0);
            if root < 1.0 {
                roots.push(root);
            }
        }
        prev = cur;
    }

    let equilibria: Vec<_> = roots
        .into_iter()
        .map(|l| Equilibrium { lambda_eq: l, stability: classify(l, tb, params, surface), torque: tb })
        .collect();
    let wheel_lock = equilibria.is_empty();
    Ok(EquilibriumSet { equilibria, wheel_lock })
}

fn bisect(g: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut ga = g(a);
    while b - a > BISECT_TOL {
        let m = 0.5 * (a + b);
        let gm = g(m);
        if gm == 0.0 {
            return m;
        }
        if (gm < 0.0) == (ga < 0.0) {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn classify(lambda: f64, tb: f64, params: &VehicleParams, surface: &RoadSurface) -> Stability {
    // the sign of the slope does not depend on the speed used here
    let v = 1.0;
    let h = CLASSIFY_STEP;
    let slope = (slip_field(lambda + h, tb, v, params, surface)
        - slip_field(lambda - h, tb, v, params, surface))
        / (2.0 * h);
    if slope < 0.0 {
        Stability::LocallyAsymptoticallyStable
    } else {
        Stability::Unstable
    }
}

/// `gain_num * (s - zero) / (s - pole)`, or `gain_num / (s - pole)` without a zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrderTf {
    pub gain_num: f64,
    pub zero: Option<f64>,
    pub pole: f64,
}

impl FirstOrderTf {
    /// `(re, im)` of `G(j omega)`.
    pub fn freq_response(&self, omega: f64) -> (f64, f64) {
        // 1 / (j omega - pole) = (-pole - j omega) / (pole^2 + omega^2)
        let den = self.pole * self.pole + omega * omega;
        let (ir, ii) = (-self.pole / den, -omega / den);
        let (nr, ni) = match self.zero {
            Some(z) => (-z, omega),
            None => (1.0, 0.0),
        };
        (self.gain_num * (nr * ir - ni * ii), self.gain_num * (nr * ii + ni * ir))
    }

    pub fn magnitude(&self, omega: f64) -> f64 {
        let (re, im) = self.freq_response(omega);
        re.hypot(im)
    }

    pub fn phase(&self, omega: f64) -> f64 {
        let (re, im) = self.freq_response(omega);
        im.atan2(re)
    }

    /// `G(0)`.
    pub fn dc_gain(&self) -> f64 {
        match self.zero {
            Some(z) => self.gain_num * z / self.pole,
            None => -self.gain_num / self.pole,
        }
    }
}

fn check_operating_point(lambda_bar: f64, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda_bar) {
        return Err(Error::SlipOutOfRange(lambda_bar));
    }
    if v <= V_EPS {
        return Err(Error::VehicleStopped(v));
    }
    Ok(())
}

/// The slip-equation pole at `lambda_bar`, speed `v`:
/// `-(Fz / (m v)) [mu'(1 - lambda + m r^2 / J) - mu]`.
fn slip_pole(lambda_bar: f64, v: f64, params: &VehicleParams, surface: &RoadSurface) -> f64 {
    let mu = surface.mu_unchecked(lambda_bar);
    let dmu = surface.mu_prime_unchecked(lambda_bar);
    let p = params;
    let lever = 1.0 - lambda_bar + p.mass * p.radius * p.radius / p.inertia;
    -(p.normal_load / (p.mass * v)) * (dmu * lever - mu)
}

/// Brake torque to slip transfer function about `lambda_bar`.
pub fn linearize_slip(
    lambda_bar: f64,
    v: f64,
    params: &VehicleParams,
    surface: &RoadSurface,
) -> Result<FirstOrderTf> {
    check_operating_point(lambda_bar, v)?;
    Ok(FirstOrderTf {
        gain_num: params.radius / (params.inertia * v),
        zero: None,
        pole: slip_pole(lambda_bar, v, params, surface),
    })
}

/// Brake torque to normalized wheel deceleration `eta = -r dw/dt / g`.
pub fn linearize_decel(
    lambda_bar: f64,
    v: f64,
    params: &VehicleParams,
    surface: &RoadSurface,
) -> Result<FirstOrderTf> {
    check_operating_point(lambda_bar, v)?;
    let mu = surface.mu_unchecked(lambda_bar);
    let dmu = surface.mu_prime_unchecked(lambda_bar);
    let zero = -(params.normal_load / (params.mass * v)) * (dmu * (1.0 - lambda_bar) - mu);
    Ok(FirstOrderTf {
        gain_num: params.radius / (params.inertia * params.gravity),
        zero: Some(zero),
        pole: slip_pole(lambda_bar, v, params, surface),
    })
}

/// Smallest proportional gain `K` (torque per unit slip error) that
/// stabilizes the slip loop about `lambda_bar`. Independent of speed.
pub fn stability_gain_bound(lambda_bar: f64, params: &VehicleParams, surface: &RoadSurface) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda_bar) {
        return Err(Error::SlipOutOfRange(lambda_bar));
    }
    let p = params;
    let mu = surface.mu_unchecked(lambda_bar);
    let dmu = surface.mu_prime_unchecked(lambda_bar);
    let scale = p.normal_load * p.inertia / (p.mass * p.radius);
    let lever = (1.0 - lambda_bar) + p.mass * p.radius * p.radius / p.inertia;
    Ok(-dmu * scale * lever + mu * scale)
}

/// Root of the proportional closed-loop characteristic polynomial
/// `s + (1/v)[mu' Fz / m (1 - lambda + m r^2 / J) + K r / J] - mu Fz / (m v)`.
pub fn closed_loop_pole(
    lambda_bar: f64,
    v: f64,
    gain: f64,
    params: &VehicleParams,
    surface: &RoadSurface,
) -> Result<f64> {
    check_operating_point(lambda_bar, v)?;
    let p = params;
    let mu = surface.mu_unchecked(lambda_bar);
    let dmu = surface.mu_prime_unchecked(lambda_bar);
    let lever = 1.0 - lambda_bar + p.mass * p.radius * p.radius / p.inertia;
    Ok(-(dmu * p.normal_load / p.mass * lever + gain * p.radius / p.inertia) / v
        + mu * p.normal_load / (p.mass * v))
}

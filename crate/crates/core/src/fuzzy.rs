//! Road-condition weighting of parallel surface-tuned controllers.
//!
//! An estimate of the optimal slip is mapped through one membership function
//! per surface. The normalized memberships weight the torque commands of a
//! bank of controllers, each tuned for its own surface and all tracking the
//! equally weighted optimal-slip reference.

use serde::{Deserialize, Serialize};

use crate::controllers::{Measurement, SlipController};
use crate::error::{Error, Result};
use crate::friction::SurfaceSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MembershipKind {
    Triangular,
    /// Saturated at 1 to the left of the center.
    ShoulderedLeft,
    /// Saturated at 1 to the right of the center.
    ShoulderedRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembershipFunction {
    pub kind: MembershipKind,
    pub center: f64,
    pub left_foot: f64,
    pub right_foot: f64,
}

impl MembershipFunction {
    pub fn new(kind: MembershipKind, left_foot: f64, center: f64, right_foot: f64) -> Result<Self> {
        let f = Self { kind, center, left_foot, right_foot };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.left_foot, self.center, self.right_foot].iter().all(|x| x.is_finite())
            && self.left_foot <= self.center
            && self.center <= self.right_foot;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "membership feet must satisfy left <= center <= right, got {self:?}"
            )))
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        let rising = || {
            if x <= self.left_foot {
                0.0
            } else if x >= self.center {
                1.0
            } else {
                (x - self.left_foot) / (self.center - self.left_foot)
            }
        };
        let falling = || {
            if x >= self.right_foot {
                0.0
            } else if x <= self.center {
                1.0
            } else {
                (self.right_foot - x) / (self.right_foot - self.center)
            }
        };
        match self.kind {
            MembershipKind::ShoulderedLeft => falling(),
            MembershipKind::ShoulderedRight => rising(),
            MembershipKind::Triangular => {
                if x == self.center {
                    1.0
                } else if x < self.center {
                    rising()
                } else {
                    falling()
                }
            }
        }
    }
}

/// Labelled membership functions, one per surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipBank {
    pub labels: Vec<String>,
    pub functions: Vec<MembershipFunction>,
}

impl MembershipBank {
    pub fn new(labels: Vec<String>, functions: Vec<MembershipFunction>) -> Result<Self> {
        let bank = Self { labels, functions };
        bank.validate()?;
        Ok(bank)
    }

    /// Centers at each surface's optimal slip, feet at the neighboring
    /// centers, outermost functions shouldered out to 0 and 1.
    pub fn from_surfaces(surfaces: &SurfaceSet) -> Result<Self> {
        let mut centers = surfaces
            .iter()
            .map(|s| Ok((s.name.clone(), s.optimal_slip()?.slip)))
            .collect::<Result<Vec<_>>>()?;
        centers.sort_by(|a, b| a.1.total_cmp(&b.1));
        let n = centers.len();
        let mut labels = Vec::with_capacity(n);
        let mut functions = Vec::with_capacity(n);
        for (i, (name, c)) in centers.iter().enumerate() {
            let left = if i == 0 { 0.0 } else { centers[i - 1].1 };
            let right = if i + 1 == n { 1.0 } else { centers[i + 1].1 };
            let kind = if n == 1 || i == 0 {
                MembershipKind::ShoulderedLeft
            } else if i + 1 == n {
                MembershipKind::ShoulderedRight
            } else {
                MembershipKind::Triangular
            };
            // a lone surface covers the whole slip range
            let center = if n == 1 { 1.0 } else { *c };
            labels.push(name.clone());
            functions.push(MembershipFunction::new(kind, left, center, right)?);
        }
        Self::new(labels, functions)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Interval `[min foot, max foot]` the bank claims to cover.
    pub fn coverage(&self) -> (f64, f64) {
        let lo = self.functions.iter().map(|f| f.left_foot).fold(f64::INFINITY, f64::min);
        let hi = self.functions.iter().map(|f| f.right_foot).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.functions.is_empty() {
            return Err(Error::InvalidParameter("membership bank is empty".into()));
        }
        if self.labels.len() != self.functions.len() {
            return Err(Error::DimensionMismatch { expected: self.functions.len(), got: self.labels.len() });
        }
        for f in &self.functions {
            f.validate()?;
        }
        // gaps show up as points where every membership is zero
        let (lo, hi) = self.coverage();
        let n = 10_000;
        for k in 0..=n {
            let x = lo + (hi - lo) * k as f64 / n as f64;
            if self.functions.iter().all(|f| f.value(x) == 0.0) {
                return Err(Error::InvalidParameter(format!("membership bank leaves a gap at slip {x}")));
            }
        }
        Ok(())
    }
}

/// Raw membership of `lambda_opt_est` in each function of `bank`. Inputs
/// outside the covered interval are clamped to it.
pub fn memberships(lambda_opt_est: f64, bank: &MembershipBank) -> Result<Vec<f64>> {
    if !lambda_opt_est.is_finite() {
        return Err(Error::SlipOutOfRange(lambda_opt_est));
    }
    let (lo, hi) = bank.coverage();
    let x = if lambda_opt_est < lo || lambda_opt_est > hi {
        log::warn!(
            "optimal-slip estimate {lambda_opt_est} outside membership coverage [{lo}, {hi}], clamping"
        );
        lambda_opt_est.clamp(lo, hi)
    } else {
        lambda_opt_est
    };
    Ok(bank.functions.iter().map(|f| f.value(x)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoadWeights {
    pub weights: Vec<(String, f64)>,
}

impl RoadWeights {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().map(|(_, w)| *w)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.weights.iter().find(|(l, _)| l == label).map(|(_, w)| *w)
    }
}

/// Normalize raw memberships to sum to one.
pub fn weights(raw: &[f64], labels: &[String]) -> Result<RoadWeights> {
    if raw.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: raw.len() });
    }
    if raw.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::InvalidParameter(format!("memberships must lie in [0, 1], got {raw:?}")));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoMembership);
    }
    Ok(RoadWeights { weights: labels.iter().cloned().zip(raw.iter().map(|m| m / total)).collect() })
}

fn weighted_sum(weights: &RoadWeights, xs: &[f64]) -> Result<f64> {
    if xs.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: weights.len(), got: xs.len() });
    }
    Ok(weights.values().zip(xs).map(|(w, x)| w * x).sum())
}

/// Convex combination of per-surface torque commands.
pub fn blend(weights: &RoadWeights, commands: &[f64]) -> Result<f64> {
    weighted_sum(weights, commands)
}

/// Slip reference shared by the controller bank.
pub fn weighted_reference(weights: &RoadWeights, lambda_opts: &[f64]) -> Result<f64> {
    weighted_sum(weights, lambda_opts)
}

/// One controller per bank entry, each stepped every tick so that a weight
/// change never meets stale controller state.
pub struct BlendedController {
    pub bank: MembershipBank,
    pub lambda_opts: Vec<f64>,
    pub controllers: Vec<Box<dyn SlipController>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutput {
    pub torque: f64,
    pub reference: f64,
    pub weights: RoadWeights,
}

impl BlendedController {
    pub fn new(
        bank: MembershipBank,
        lambda_opts: Vec<f64>,
        controllers: Vec<Box<dyn SlipController>>,
    ) -> Result<Self> {
        for got in [lambda_opts.len(), controllers.len()] {
            if got != bank.len() {
                return Err(Error::DimensionMismatch { expected: bank.len(), got });
            }
        }
        Ok(Self { bank, lambda_opts, controllers })
    }

    /// Weights and blended reference for an optimal-slip estimate.
    pub fn schedule(&self, lambda_opt_est: f64) -> Result<(RoadWeights, f64)> {
        let w = weights(&memberships(lambda_opt_est, &self.bank)?, &self.bank.labels)?;
        let r = weighted_reference(&w, &self.lambda_opts)?;
        Ok((w, r))
    }

    /// Step every controller toward `reference` and blend with `weights`.
    pub fn step(&mut self, m: &Measurement, weights: &RoadWeights, reference: f64, dt: f64) -> Result<f64> {
        let commands: Vec<f64> = self.controllers.iter_mut().map(|c| c.step(m, reference, dt)).collect();
        blend(weights, &commands)
    }

    pub fn reset(&mut self) {
        self.controllers.iter_mut().for_each(|c| c.reset());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank() -> MembershipBank {
        MembershipBank::from_surfaces(&SurfaceSet::presets()).unwrap()
    }

    fn centers() -> Vec<f64> {
        bank().functions.iter().map(|f| f.center).collect()
    }

    #[test]
    fn default_bank_is_ordered_snow_wet_dry() {
        let b = bank();
        assert_eq!(b.labels, ["snow", "wet", "dry"]);
        assert_eq!(b.functions[0].kind, MembershipKind::ShoulderedLeft);
        assert_eq!(b.functions[1].kind, MembershipKind::Triangular);
        assert_eq!(b.functions[2].kind, MembershipKind::ShoulderedRight);
        assert_eq!(b.coverage(), (0.0, 1.0));
        assert!((b.functions[2].center - 0.17000840950972047).abs() < 1e-12);
    }

    #[test]
    fn crisp_at_each_center() {
        let b = bank();
        for (i, c) in centers().into_iter().enumerate() {
            let m = memberships(c, &b).unwrap();
            for (j, v) in m.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn midpoint_of_wet_and_snow_splits_evenly() {
        let c = centers();
        let m = memberships(0.5 * (c[0] + c[1]), &bank()).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
        assert_eq!(m[2], 0.0);
    }

    #[test]
    fn dry_shoulder_saturates() {
        let c = centers();
        assert_eq!(memberships(c[2] + 0.01, &bank()).unwrap(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn out_of_coverage_input_is_clamped() {
        let b = MembershipBank::new(
            vec!["a".into(), "b".into()],
            vec![
                MembershipFunction::new(MembershipKind::ShoulderedLeft, 0.1, 0.1, 0.3).unwrap(),
                MembershipFunction::new(MembershipKind::ShoulderedRight, 0.1, 0.3, 0.3).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(memberships(0.9, &b).unwrap(), [0.0, 1.0]);
        assert_eq!(memberships(0.0, &b).unwrap(), [1.0, 0.0]);
    }

    #[test]
    fn gappy_bank_is_rejected() {
        let r = MembershipBank::new(
            vec!["a".into(), "b".into()],
            vec![
                MembershipFunction::new(MembershipKind::ShoulderedLeft, 0.0, 0.1, 0.2).unwrap(),
                MembershipFunction::new(MembershipKind::ShoulderedRight, 0.3, 0.4, 1.0).unwrap(),
            ],
        );
        assert!(r.is_err());
        assert!(MembershipFunction::new(MembershipKind::Triangular, 0.3, 0.2, 0.4).is_err());
    }

    #[test]
    fn weight_normalization_examples() {
        let l: Vec<String> = ["dry", "wet", "snow"].map(String::from).into();
        let v = |raw: &[f64]| weights(raw, &l).unwrap().values().collect::<Vec<_>>();
        assert_eq!(v(&[1.0, 0.0, 0.0]), [1.0, 0.0, 0.0]);
        assert_eq!(v(&[0.5, 0.5, 0.0]), [0.5, 0.5, 0.0]);
        let w = v(&[0.2, 0.6, 0.2]);
        for (a, b) in w.iter().zip([0.2, 0.6, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(weights(&[0.0, 0.0, 0.0], &l), Err(Error::NoMembership));
        assert!(weights(&[0.5, 0.5], &l).is_err());
    }

    #[test]
    fn blend_examples() {
        let l: Vec<String> = ["dry", "wet", "snow"].map(String::from).into();
        let crisp = weights(&[1.0, 0.0, 0.0], &l).unwrap();
        assert_eq!(blend(&crisp, &[731.25, 400.0, 120.0]).unwrap(), 731.25);
        let half = weights(&[0.5, 0.5, 0.0], &l).unwrap();
        assert_eq!(blend(&half, &[100.0, 300.0, 900.0]).unwrap(), 200.0);
        assert!(matches!(blend(&half, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn weighted_reference_examples() {
        let b = bank();
        let c = centers();
        let w = weights(&memberships(c[2], &b).unwrap(), &b.labels).unwrap();
        assert_eq!(weighted_reference(&w, &c).unwrap(), c[2]);
        let mid = weights(&memberships(0.5 * (c[0] + c[1]), &b).unwrap(), &b.labels).unwrap();
        let r = weighted_reference(&mid, &c).unwrap();
        assert!((r - 0.5 * (c[0] + c[1])).abs() < 1e-12);
        assert!((weighted_reference(&mid, &[0.1, 0.1, 0.1]).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn weights_are_lipschitz_across_boundaries() {
        // the steepest membership slope is one over the smallest center spacing
        let c = centers();
        let l = 1.0 / (c[1] - c[0]).min(c[2] - c[1]);
        let b = bank();
        let cmds = [90.0, 600.0, 1400.0];
        let h = 1e-4;
        let mut prev: Option<(Vec<f64>, f64)> = None;
        for k in 0..=10_000 {
            let x = k as f64 * h;
            let w = weights(&memberships(x, &b).unwrap(), &b.labels).unwrap();
            let u = blend(&w, &cmds).unwrap();
            let wv: Vec<f64> = w.values().collect();
            if let Some((pw, pu)) = &prev {
                for (a, b) in wv.iter().zip(pw) {
                    assert!((a - b).abs() <= l * h * (1.0 + 1e-9));
                }
                assert!((u - pu).abs() <= l * h * (1400.0 - 90.0) * (1.0 + 1e-9));
            }
            prev = Some((wv, u));
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_convexity(x in 0.0f64..=1.0, cmds in prop::array::uniform3(0.0f64..1500.0)) {
            let b = bank();
            let w = weights(&memberships(x, &b).unwrap(), &b.labels).unwrap();
            let s: f64 = w.values().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(w.values().all(|v| (0.0..=1.0).contains(&v)));
            let u = blend(&w, &cmds).unwrap();
            let lo = cmds.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = cmds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(u >= lo - 1e-9 && u <= hi + 1e-9);
        }

        #[test]
        fn equal_commands_blend_to_themselves(x in 0.0f64..=1.0, c in 0.0f64..1500.0) {
            let b = bank();
            let w = weights(&memberships(x, &b).unwrap(), &b.labels).unwrap();
            prop_assert!((blend(&w, &[c, c, c]).unwrap() - c).abs() < 1e-9);
        }
    }
}

//! Burckhardt tire-road friction law.
//!
//! `mu(lambda) = theta1 * (1 - exp(-theta2 * lambda)) - theta3 * lambda`
//!
//! Surfaces are plain coefficient triples. The three canonical presets (dry
//! asphalt, wet asphalt, snow) live in `data/surfaces.toml` and are embedded
//! at compile time; user files with the same layout can replace them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRESETS_TOML: &str = include_str!("../data/surfaces.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSurface {
    pub name: String,
    /// Peak factor.
    pub theta1: f64,
    /// Shape factor.
    pub theta2: f64,
    /// Linear loss factor.
    pub theta3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrictionCurvePoint {
    pub lambda: f64,
    pub mu: f64,
}

/// Location of the friction peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalSlip {
    pub slip: f64,
    /// Set when `mu` is increasing on all of `[0, 1]`; `slip` is then 1.0.
    pub monotone: bool,
}

fn check_slip(slip: f64) -> Result<()> {
    if (0.0..=1.0).contains(&slip) {
        Ok(())
    } else {
        Err(Error::SlipOutOfRange(slip))
    }
}

impl RoadSurface {
    pub fn new(name: impl Into<String>, theta1: f64, theta2: f64, theta3: f64) -> Result<Self> {
        let surface = Self { name: name.into(), theta1, theta2, theta3 };
        surface.validate()?;
        Ok(surface)
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |reason: &str| Err(Error::InvalidSurface { name: self.name.clone(), reason: reason.to_string() });
        if !(self.theta1.is_finite() && self.theta2.is_finite() && self.theta3.is_finite()) {
            return bad("coefficients must be finite");
        }
        if self.theta1 <= 0.0 {
            return bad("theta1 must be > 0");
        }
        if self.theta2 <= 0.0 {
            return bad("theta2 must be > 0");
        }
        if self.theta3 < 0.0 {
            return bad("theta3 must be >= 0");
        }
        Ok(())
    }

    /// Friction coefficient at `slip`.
    pub fn mu(&self, slip: f64) -> Result<f64> {
        check_slip(slip)?;
        Ok(self.mu_unchecked(slip))
    }

    /// Slope of the friction curve at `slip`.
    pub fn mu_prime(&self, slip: f64) -> Result<f64> {
        check_slip(slip)?;
        Ok(self.mu_prime_unchecked(slip))
    }

    /// The closed-form law without the domain check. The formula is analytic,
    /// so callers doing finite differences or root scans may step slightly
    /// outside `[0, 1]`.
    #[inline]
    pub fn mu_unchecked(&self, slip: f64) -> f64 {
        self.theta1 * (1.0 - (-slip * self.theta2).exp()) - slip * self.theta3
    }

    #[inline]
    pub fn mu_prime_unchecked(&self, slip: f64) -> f64 {
        self.theta1 * self.theta2 * (-slip * self.theta2).exp() - self.theta3
    }

    /// Slip of maximum friction, from the root of `mu_prime`.
    pub fn optimal_slip(&self) -> Result<OptimalSlip> {
        self.validate()?;
        let slope_at_zero = self.theta1 * self.theta2;
        if self.theta3 == 0.0 {
            return Ok(OptimalSlip { slip: 1.0, monotone: true });
        }
        if slope_at_zero <= self.theta3 {
            return Err(Error::NoPeak(self.name.clone()));
        }
        let slip = (slope_at_zero / self.theta3).ln() / self.theta2;
        if slip >= 1.0 {
            return Ok(OptimalSlip { slip: 1.0, monotone: true });
        }
        Ok(OptimalSlip { slip, monotone: false })
    }

    /// Peak friction coefficient `mu(optimal_slip)`.
    pub fn peak_mu(&self) -> Result<f64> {
        let opt = self.optimal_slip()?;
        Ok(self.mu_unchecked(opt.slip))
    }

    /// `n_points` uniform samples of the curve on `[0, 1]`, endpoints included.
    pub fn friction_curve(&self, n_points: usize) -> Result<Vec<FrictionCurvePoint>> {
        if n_points < 2 {
            return Err(Error::InvalidParameter(format!(
                "friction curve needs at least 2 points, got {n_points}"
            )));
        }
        let last = (n_points - 1) as f64;
        Ok((0..n_points)
            .map(|i| {
                // i == n-1 hits 1.0 exactly
                let lambda = i as f64 / last;
                FrictionCurvePoint { lambda, mu: self.mu_unchecked(lambda) }
            })
            .collect())
    }
}

#[derive(Debug, Deserialize)]
struct SurfaceFile {
    surface: Vec<RoadSurface>,
}

/// An ordered collection of named surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    surfaces: Vec<RoadSurface>,
}

impl SurfaceSet {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SurfaceFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("surface file: {e}")))?;
        Self::from_surfaces(file.surface)
    }

    pub fn from_surfaces(surfaces: Vec<RoadSurface>) -> Result<Self> {
        if surfaces.is_empty() {
            return Err(Error::Config("surface file holds no surfaces".into()));
        }
        for (i, s) in surfaces.iter().enumerate() {
            s.validate()?;
            if surfaces[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate surface `{}`", s.name)));
            }
        }
        Ok(Self { surfaces })
    }

    /// The built-in dry / wet / snow presets.
    pub fn presets() -> Self {
        Self::from_toml_str(PRESETS_TOML).expect("embedded surface presets are valid")
    }

    pub fn get(&self, name: &str) -> Result<&RoadSurface> {
        self.surfaces.iter().find(|s| s.name == name).ok_or_else(|| Error::UnknownSurface(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &RoadSurface> {
        self.surfaces.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.surfaces.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }
}

pub fn dry_asphalt() -> RoadSurface {
    SurfaceSet::presets().get("dry").cloned().unwrap()
}

pub fn wet_asphalt() -> RoadSurface {
    SurfaceSet::presets().get("wet").cloned().unwrap()
}

pub fn snow() -> RoadSurface {
    SurfaceSet::presets().get("snow").cloned().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force argmax of `mu` on a uniform grid.
    fn grid_argmax(surface: &RoadSurface, step: f64) -> f64 {
        let n = (1.0 / step).round() as usize;
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 0..=n {
            let l = i as f64 * step;
            let m = surface.mu_unchecked(l);
            if m > best.1 {
                best = (l, m);
            }
        }
        best.0
    }

    #[test]
    fn mu_vanishes_at_zero_slip() {
        for s in SurfaceSet::presets().iter() {
            assert_eq!(s.mu(0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn mu_saturates_without_linear_loss() {
        let s = RoadSurface::new("steep", 0.9, 500.0, 0.0).unwrap();
        assert!((s.mu(1.0).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn dry_mu_matches_reference_value() {
        // 30-digit evaluation of the closed form with the dry coefficients
        let expected = 1.170_019_928_406_221_2;
        assert!((dry_asphalt().mu(0.17).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_slip_is_rejected() {
        let s = dry_asphalt();
        assert_eq!(s.mu(-0.1), Err(Error::SlipOutOfRange(-0.1)));
        assert_eq!(s.mu_prime(1.5), Err(Error::SlipOutOfRange(1.5)));
    }

    #[test]
    fn slope_at_zero() {
        for s in SurfaceSet::presets().iter() {
            let expected = s.theta1 * s.theta2 - s.theta3;
            assert_eq!(s.mu_prime(0.0).unwrap(), expected);
        }
    }

    #[test]
    fn optimal_slip_first_order_condition() {
        let s = dry_asphalt();
        let opt = s.optimal_slip().unwrap();
        assert!(!opt.monotone);
        assert!(s.mu_prime(opt.slip).unwrap().abs() < 1e-9);
        // closed form vs high-precision reference
        assert!((opt.slip - 0.170_008_409_509_720_47).abs() < 1e-14);
    }

    #[test]
    fn optimal_slip_agrees_with_grid_search() {
        for s in SurfaceSet::presets().iter() {
            let closed = s.optimal_slip().unwrap().slip;
            let grid = grid_argmax(s, 1e-5);
            assert!((closed - grid).abs() < 1e-4, "{}: {closed} vs {grid}", s.name);
        }
    }

    #[test]
    fn snow_peaks_before_dry() {
        let snow_opt = grid_argmax(&snow(), 1e-5);
        let dry_opt = grid_argmax(&dry_asphalt(), 1e-5);
        assert!(snow_opt < dry_opt);
        assert!(snow().optimal_slip().unwrap().slip < dry_asphalt().optimal_slip().unwrap().slip);
    }

    #[test]
    fn monotone_surface_reports_full_slip() {
        let s = RoadSurface::new("flat", 0.8, 20.0, 0.0).unwrap();
        let opt = s.optimal_slip().unwrap();
        assert!(opt.monotone);
        assert_eq!(opt.slip, 1.0);
    }

    #[test]
    fn degenerate_surface_has_no_peak() {
        let s = RoadSurface::new("bad", 0.1, 2.0, 0.5).unwrap();
        assert_eq!(s.optimal_slip(), Err(Error::NoPeak("bad".into())));
    }

    #[test]
    fn invalid_coefficients_rejected() {
        assert!(RoadSurface::new("x", 0.0, 1.0, 0.0).is_err());
        assert!(RoadSurface::new("x", 1.0, -1.0, 0.0).is_err());
        assert!(RoadSurface::new("x", 1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn two_point_curve_is_the_endpoints() {
        let s = wet_asphalt();
        let c = s.friction_curve(2).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].lambda, c[0].mu), (0.0, 0.0));
        assert_eq!(c[1].lambda, 1.0);
        assert_eq!(c[1].mu, s.mu(1.0).unwrap());
        assert!(s.friction_curve(1).is_err());
    }

    #[test]
    fn sampled_curve_peaks_next_to_optimal_slip() {
        let s = dry_asphalt();
        let c = s.friction_curve(101).unwrap();
        assert_eq!((c[0].lambda, c[0].mu), (0.0, 0.0));
        assert!(c.windows(2).all(|w| w[1].lambda > w[0].lambda));
        let imax = c.iter().enumerate().max_by(|a, b| a.1.mu.partial_cmp(&b.1.mu).unwrap()).unwrap().0;
        let opt = s.optimal_slip().unwrap().slip;
        assert_eq!(imax, (opt * 100.0).round() as usize);
    }

    #[test]
    fn snow_curve_below_dry_curve() {
        let dry = dry_asphalt().friction_curve(101).unwrap();
        let snow = snow().friction_curve(101).unwrap();
        for (d, s) in dry.iter().zip(&snow).filter(|(d, _)| d.lambda >= 0.05) {
            assert!(s.mu < d.mu, "lambda {}", d.lambda);
        }
    }

    #[test]
    fn preset_ordering_over_braking_range() {
        let (d, w, s) = (dry_asphalt(), wet_asphalt(), snow());
        for i in 0..=9500 {
            let l = 0.05 + i as f64 * 1e-4;
            let (md, mw, ms) = (d.mu_unchecked(l), w.mu_unchecked(l), s.mu_unchecked(l));
            assert!(ms < mw && mw < md, "lambda {l}");
        }
    }

    #[test]
    fn surface_file_round_trip_and_lookup() {
        let set = SurfaceSet::presets();
        assert_eq!(set.names(), vec!["dry", "wet", "snow"]);
        assert!(matches!(set.get("ice"), Err(Error::UnknownSurface(_))));
        let dup = "[[surface]]\nname='a'\ntheta1=1\ntheta2=1\ntheta3=0\n\
                   [[surface]]\nname='a'\ntheta1=1\ntheta2=1\ntheta3=0\n";
        assert!(SurfaceSet::from_toml_str(dup).is_err());
    }

    fn any_surface() -> impl Strategy<Value = RoadSurface> {
        (0.05f64..1.5, 5.0f64..120.0, 0.0f64..0.6)
            .prop_map(|(a, b, c)| RoadSurface::new("p", a, b, c).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn slope_matches_central_difference(s in any_surface(), l in 1e-3f64..0.999) {
            let h = 1e-6;
            let fd = (s.mu_unchecked(l + h) - s.mu_unchecked(l - h)) / (2.0 * h);
            prop_assert!((fd - s.mu_prime(l).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn optimal_slip_is_a_local_max(s in any_surface()) {
            if let Ok(opt) = s.optimal_slip() {
                if !opt.monotone {
                    let l = opt.slip;
                    prop_assert!(s.mu_prime_unchecked(l).abs() < 1e-9);
                    prop_assert!(s.mu_unchecked(l) >= s.mu_unchecked(l + 1e-3));
                    prop_assert!(s.mu_unchecked(l) >= s.mu_unchecked((l - 1e-3).max(0.0)));
                }
            }
        }
    }
}

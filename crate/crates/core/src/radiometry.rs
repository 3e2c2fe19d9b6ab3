//! Camera response functions, exposure arithmetic and re-exposure.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_unit, Image, LdrImage};

/// Encoding exponent of the default display response, `x^(1/2.2)`.
pub const DEFAULT_GAMMA: f64 = 1.0 / 2.2;
pub const DEFAULT_PARAM_BETA: f64 = 0.6;
pub const DEFAULT_PARAM_GAMMA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrfKind {
    /// `x^gamma`
    Gamma,
    /// `(1 + beta) x^gamma / (beta + x^gamma)`
    Parametric,
}

/// A camera response function mapping linear irradiance in `[0, 1]` to
/// encoded display values in `[0, 1]`.
///
/// Both kinds are strictly increasing with `CRF(0) = 0` and `CRF(1) = 1` and
/// have closed-form inverses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crf {
    pub kind: CrfKind,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for Crf {
    fn default() -> Self {
        Self::gamma(DEFAULT_GAMMA).expect("default gamma is valid")
    }
}

impl Crf {
    pub fn gamma(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("CRF gamma must be positive, got {gamma}")));
        }
        Ok(Self {
            kind: CrfKind::Gamma,
            gamma,
            beta: DEFAULT_PARAM_BETA,
        })
    }

    /// The linear response; handy for worked examples.
    pub fn identity() -> Self {
        Self::gamma(1.0).expect("1 is a valid gamma")
    }

    pub fn parametric(beta: f64, gamma: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0 && gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!(
                "parametric CRF needs beta > 0 and gamma > 0, got beta={beta} gamma={gamma}"
            )));
        }
        Ok(Self {
            kind: CrfKind::Parametric,
            gamma,
            beta,
        })
    }

    /// Forward response for a single sample already known to lie in `[0, 1]`.
    #[inline]
    pub fn apply_scalar(&self, x: f64) -> f64 {
        let p = x.powf(self.gamma);
        match self.kind {
            CrfKind::Gamma => p,
            CrfKind::Parametric => (1.0 + self.beta) * p / (self.beta + p),
        }
    }

    /// Inverse response for a single sample already known to lie in `[0, 1]`.
    #[inline]
    pub fn invert_scalar(&self, y: f64) -> f64 {
        match self.kind {
            CrfKind::Gamma => y.powf(1.0 / self.gamma),
            CrfKind::Parametric => {
                let u = self.beta * y / (1.0 + self.beta - y);
                u.powf(1.0 / self.gamma)
            }
        }
    }

    pub fn apply(&self, linear: &[f64]) -> Result<Vec<f64>> {
        check_unit_range(linear)?;
        Ok(linear.iter().map(|&x| self.apply_scalar(x)).collect())
    }

    pub fn invert(&self, encoded: &[f64]) -> Result<Vec<f64>> {
        check_unit_range(encoded)?;
        Ok(encoded.iter().map(|&y| self.invert_scalar(y)).collect())
    }

    /// Re-exposes one encoded sample by the linear factor `ratio`, then
    /// clamps to the sensor range and re-encodes.
    #[inline]
    pub fn re_expose_scalar(&self, encoded: f64, ratio: f64) -> f64 {
        if ratio == 1.0 {
            return encoded;
        }
        self.apply_scalar((ratio * self.invert_scalar(encoded)).clamp(0.0, 1.0))
    }
}

impl fmt::Display for Crf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CrfKind::Gamma => write!(f, "gamma:{}", 1.0 / self.gamma),
            CrfKind::Parametric => write!(f, "param:{},{}", self.beta, self.gamma),
        }
    }
}

/// Parses `gamma:<denominator>` (so `gamma:2.2` encodes with `x^(1/2.2)`),
/// `param:<beta>,<gamma>`, or `identity`.
impl FromStr for Crf {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognised CRF '{s}'"));
        let s = s.trim();
        if s == "identity" || s == "linear" {
            return Ok(Self::identity());
        }
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "gamma" => {
                let denom: f64 = args.trim().parse().map_err(|_| bad())?;
                if !(denom.is_finite() && denom > 0.0) {
                    return Err(bad());
                }
                Self::gamma(1.0 / denom)
            }
            "param" => {
                let (b, g) = args.split_once(',').ok_or_else(bad)?;
                let beta = b.trim().parse().map_err(|_| bad())?;
                let gamma = g.trim().parse().map_err(|_| bad())?;
                Self::parametric(beta, gamma)
            }
            _ => Err(bad()),
        }
    }
}

fn check_unit_range(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(format!("CRF input {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Linear exposure factor between two exposure values: `2^(target - reference)`.
pub fn ev_ratio(ev_target: f64, ev_reference: f64) -> f64 {
    (ev_target - ev_reference).exp2()
}

/// An LDR image tagged with its exposure value in stops.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureBracket {
    pub image: LdrImage,
    pub ev: f64,
}

impl ExposureBracket {
    pub fn new(image: LdrImage, ev: f64) -> Result<Self> {
        if !ev.is_finite() {
            return Err(Error::Domain(format!("exposure value {ev} is not finite")));
        }
        Ok(Self { image, ev })
    }
}

/// Simulates what a camera would have recorded at `target_ev` given the
/// reference bracket: invert the response, scale by the exposure ratio,
/// clamp to the sensor range and encode again.
pub fn re_expose(reference: &ExposureBracket, target_ev: f64, crf: &Crf) -> LdrImage {
    let ratio = ev_ratio(target_ev, reference.ev);
    let img = reference
        .image
        .map(|v| clamp_unit(crf.re_expose_scalar(v, ratio)));
    LdrImage::from_clamped(img)
}

/// Saturation mask `sat(x) = x`.
pub fn sat_weight(x: &LdrImage) -> Image {
    x.image().clone()
}

/// Dark-region mask `dark(x) = 1 - x`.
pub fn dark_weight(x: &LdrImage) -> Image {
    x.map(|v| 1.0 - v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bracket(v: f64, ev: f64) -> ExposureBracket {
        ExposureBracket::new(LdrImage::filled(1, 1, 1, v).unwrap(), ev).unwrap()
    }

    #[test]
    fn gamma_endpoints_and_midpoint() {
        let crf = Crf::default();
        assert_eq!(crf.apply(&[0.0]).unwrap(), vec![0.0]);
        // 0.5^(1/2.2), evaluated independently
        assert_abs_diff_eq!(crf.apply(&[0.5]).unwrap()[0], 0.729_740_052_6, epsilon = 1e-9);
        assert_abs_diff_eq!(crf.invert(&[0.729_740_052_6]).unwrap()[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn parametric_endpoints() {
        let crf = Crf::parametric(0.6, 0.9).unwrap();
        assert_eq!(crf.apply(&[1.0]).unwrap(), vec![1.0]);
        assert_eq!(crf.invert(&[0.0]).unwrap(), vec![0.0]);
        assert_abs_diff_eq!(crf.invert(&[1.0]).unwrap()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_round_trip_point() {
        let crf = Crf::default();
        let y = crf.apply(&[0.3]).unwrap();
        assert_abs_diff_eq!(crf.invert(&y).unwrap()[0], 0.3, epsilon = 1e-9);
    }

    #[test]
    fn out_of_range_is_domain_error() {
        let crf = Crf::default();
        assert!(matches!(crf.apply(&[1.01]), Err(Error::Domain(_))));
        assert!(matches!(crf.invert(&[-0.01]), Err(Error::Domain(_))));
    }

    #[test]
    fn ev_ratio_examples() {
        assert_eq!(ev_ratio(-1.0, 0.0), 0.5);
        assert_eq!(ev_ratio(std::f64::consts::E, std::f64::consts::E), 1.0);
        assert_eq!(ev_ratio(4.0, -4.0), 256.0);
    }

    #[test]
    fn re_expose_examples() {
        let crf = Crf::default();
        let out = re_expose(&bracket(0.5, 0.0), -1.0, &crf);
        // 0.5^(1/2.2) * 0.5
        assert_abs_diff_eq!(out.get(0, 0, 0), 0.364_870_026_3, epsilon = 1e-9);

        let same = re_expose(&bracket(0.37, 1.5), 1.5, &crf);
        assert_eq!(same.get(0, 0, 0), 0.37);

        let sat = re_expose(&bracket(1.0, 0.0), 1.0, &crf);
        assert_eq!(sat.get(0, 0, 0), 1.0);
    }

    #[test]
    fn masks() {
        let x = LdrImage::new(Image::from_vec(1, 3, 1, vec![1.0, 0.0, 0.25]).unwrap()).unwrap();
        assert_eq!(sat_weight(&x).data(), &[1.0, 0.0, 0.25]);
        assert_eq!(dark_weight(&x).data(), &[0.0, 1.0, 0.75]);
    }

    #[test]
    fn parse_crf_grammar() {
        let g: Crf = "gamma:2.2".parse().unwrap();
        assert_abs_diff_eq!(g.gamma, 1.0 / 2.2, epsilon = 1e-15);
        let p: Crf = "param:0.6,0.9".parse().unwrap();
        assert_eq!(p.kind, CrfKind::Parametric);
        assert_eq!((p.beta, p.gamma), (0.6, 0.9));
        assert!("gamma:-1".parse::<Crf>().is_err());
        assert!("spline:3".parse::<Crf>().is_err());
        assert_eq!(g.to_string().parse::<Crf>().unwrap().kind, CrfKind::Gamma);
    }

    proptest! {
        #[test]
        fn round_trip_both_kinds(x in 0.0f64..=1.0, beta in 0.3f64..1.0, gamma in 0.5f64..1.2) {
            for crf in [Crf::gamma(gamma).unwrap(), Crf::parametric(beta, gamma).unwrap()] {
                let y = crf.apply_scalar(x);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&y));
                prop_assert!((crf.invert_scalar(y) - x).abs() < 1e-9);
            }
        }

        #[test]
        fn re_expose_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, ev in -6.0f64..6.0) {
            let crf = Crf::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = ev_ratio(ev, 0.0);
            prop_assert!(crf.re_expose_scalar(lo, r) <= crf.re_expose_scalar(hi, r));
        }

        #[test]
        fn downward_re_exposure_composes(v in 0.0f64..=1.0, e1 in -4.0f64..0.0, d in -4.0f64..0.0) {
            let crf = Crf::parametric(0.6, 0.9).unwrap();
            let e2 = e1 + d;
            let once = crf.re_expose_scalar(v, ev_ratio(e2, 0.0));
            let twice = crf.re_expose_scalar(crf.re_expose_scalar(v, ev_ratio(e1, 0.0)), ev_ratio(e2, e1));
            prop_assert!((once - twice).abs() < 1e-9);
        }
    }
}

//! Noise schedules and the black-box noise-prediction contract.
//!
//! Models predict the noise `eps` that was mixed into `x_t`. The score used
//! by the sampler is recovered as `s = -eps / sqrt(1 - alpha_bar_t)`.

mod adapter;
mod analytic;
mod schedule;
pub mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

pub use adapter::{external_model_adapter, CACHE_ENV};
pub use analytic::AnalyticGaussian;
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind, LINEAR_BETA_END, LINEAR_BETA_START};

/// Opaque conditioning token (for example a text prompt) passed through to
/// models that understand it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition(pub String);

/// Range of sample values a model operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    /// `[-1, 1]`, mapped affinely to display values.
    SignedUnit,
    /// `[0, 1]`, identical to display values.
    Unit,
    /// No range constraint; used for latent codes.
    Unbounded,
}

impl ValueDomain {
    #[inline]
    pub fn clamp(self, v: f64) -> f64 {
        match self {
            ValueDomain::SignedUnit => v.clamp(-1.0, 1.0),
            ValueDomain::Unit => v.clamp(0.0, 1.0),
            ValueDomain::Unbounded => v,
        }
    }

    /// Model value to display value in `[0, 1]`.
    #[inline]
    pub fn to_unit(self, v: f64) -> f64 {
        match self {
            ValueDomain::SignedUnit => (v + 1.0) * 0.5,
            ValueDomain::Unit | ValueDomain::Unbounded => v,
        }
    }

    #[inline]
    pub fn from_unit(self, u: f64) -> f64 {
        match self {
            ValueDomain::SignedUnit => 2.0 * u - 1.0,
            ValueDomain::Unit | ValueDomain::Unbounded => u,
        }
    }

    /// `d to_unit(v) / d v`.
    #[inline]
    pub fn unit_slope(self) -> f64 {
        match self {
            ValueDomain::SignedUnit => 0.5,
            ValueDomain::Unit | ValueDomain::Unbounded => 1.0,
        }
    }
}

impl fmt::Display for ValueDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueDomain::SignedUnit => "[-1,1]",
            ValueDomain::Unit => "[0,1]",
            ValueDomain::Unbounded => "unbounded",
        })
    }
}

/// A pretrained noise predictor together with the schedule it was trained on.
pub trait ScoreModel: Send + Sync {
    /// Predicts the noise in `x_t` at schedule index `t`.
    fn predict_eps(&self, x_t: &Image, condition: Option<&Condition>, t: usize) -> Result<Image>;

    fn schedule(&self) -> &NoiseSchedule;

    fn value_domain(&self) -> ValueDomain;

    /// Native `(height, width, channels)`, if the model has one.
    fn resolution(&self) -> Option<Shape> {
        None
    }

    /// Whether `predict_eps` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        true
    }

    /// Whether the model makes use of a conditioning token.
    fn uses_condition(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

fn check_t(t: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t >= schedule.len() {
        return Err(Error::Contract(format!(
            "timestep {t} outside schedule of length {}",
            schedule.len()
        )));
    }
    Ok(())
}

/// Clean-sample estimate `(x_t - sqrt(1 - abar) eps) / sqrt(abar)`, clamped
/// to the model's value domain.
pub fn posterior_x0(x_t: &Image, eps: &Image, t: usize, schedule: &NoiseSchedule, domain: ValueDomain) -> Result<Image> {
    check_t(t, schedule)?;
    let ab = schedule.alpha_bar[t];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps, |x, e| domain.clamp((x - sn * e) / sa))
}

/// Converts a noise prediction to the score of the noisy marginal.
pub fn eps_to_score(eps: &Image, t: usize, schedule: &NoiseSchedule) -> Result<Image> {
    check_t(t, schedule)?;
    let scale = -1.0 / (1.0 - schedule.alpha_bar[t]).sqrt();
    Ok(eps.map(|e| e * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_known_clean_sample() {
        let s = make_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let x0 = Image::from_fn(2, 3, 1, |y, x, _| 0.1 * (y + x) as f64 - 0.2);
        let eps = Image::from_fn(2, 3, 1, |y, x, _| (y as f64 - x as f64) * 0.7);
        let t = 42;
        let ab = s.alpha_bar[t];
        let x_t = x0.zip_map(&eps, |a, e| ab.sqrt() * a + (1.0 - ab).sqrt() * e).unwrap();
        let est = posterior_x0(&x_t, &eps, t, &s, ValueDomain::SignedUnit).unwrap();
        for (a, b) in est.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(posterior_x0(&x_t, &eps, 100, &s, ValueDomain::Unit).is_err());
    }

    #[test]
    fn noiseless_limit_is_identity() {
        let s = NoiseSchedule {
            kind: ScheduleKind::LinearBeta,
            alpha: vec![1.0],
            alpha_bar: vec![1.0],
        };
        let x = Image::from_fn(2, 2, 1, |y, x, _| 0.2 * (y * 2 + x) as f64);
        let eps = Image::filled(2, 2, 1, 3.0);
        assert_eq!(posterior_x0(&x, &eps, 0, &s, ValueDomain::Unit).unwrap(), x);
    }

    #[test]
    fn matches_score_form() {
        // x0 = (x_t + (1 - abar) s) / sqrt(abar), with s from the eps conversion
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let x_t = Image::from_fn(3, 3, 1, |y, x, _| ((y * 3 + x) as f64 * 0.37).sin());
        let eps = Image::from_fn(3, 3, 1, |y, x, _| ((y * 3 + x) as f64 * 1.3).cos());
        for t in [0, 10, 49] {
            let score = eps_to_score(&eps, t, &s).unwrap();
            let ab = s.alpha_bar[t];
            let via_score = x_t
                .zip_map(&score, |x, sc| (x + (1.0 - ab) * sc) / ab.sqrt())
                .unwrap()
                .map(|v| v.clamp(-1.0, 1.0));
            let direct = posterior_x0(&x_t, &eps, t, &s, ValueDomain::SignedUnit).unwrap();
            for (a, b) in via_score.data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn linear_before_clamping() {
        let s = make_schedule(20, ScheduleKind::LinearBeta).unwrap();
        let a = Image::from_fn(2, 2, 1, |y, x, _| (y + 2 * x) as f64 * 0.3);
        let b = Image::from_fn(2, 2, 1, |y, x, _| (2 * y + x) as f64 * -0.2);
        let ea = Image::filled(2, 2, 1, 0.4);
        let eb = Image::filled(2, 2, 1, -1.1);
        let f = |x: &Image, e: &Image| posterior_x0(x, e, 7, &s, ValueDomain::Unbounded).unwrap();
        let sum = f(&a.zip_map(&b, |p, q| p + q).unwrap(), &ea.zip_map(&eb, |p, q| p + q).unwrap());
        let parts = f(&a, &ea).zip_map(&f(&b, &eb), |p, q| p + q).unwrap();
        for (p, q) in sum.data().iter().zip(parts.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_maps() {
        let d = ValueDomain::SignedUnit;
        assert_eq!(d.to_unit(-1.0), 0.0);
        assert_eq!(d.to_unit(1.0), 1.0);
        assert_eq!(d.from_unit(0.25), -0.5);
        assert_eq!(ValueDomain::Unit.clamp(1.5), 1.0);
    }
}

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

use super::{Condition, NoiseSchedule, ScoreModel, ValueDomain};

/// Exact noise predictor for data drawn from `N(mean, diag(var))`.
///
/// The noisy marginal at level `abar` is `N(sqrt(abar) mean, abar var + 1 - abar)`,
/// so the posterior mean of the noise is
/// `sqrt(1 - abar) (x - sqrt(abar) mean) / (abar var + 1 - abar)`.
#[derive(Debug, Clone)]
pub struct AnalyticGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
    shape: Shape,
    schedule: NoiseSchedule,
    domain: ValueDomain,
}

impl AnalyticGaussian {
    /// `mean` and `var` are either one value broadcast over the image or one
    /// value per sample.
    pub fn new(mean: Vec<f64>, var: Vec<f64>, shape: Shape, schedule: NoiseSchedule, domain: ValueDomain) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        for (name, v) in [("mean", &mean), ("variance", &var)] {
            if v.len() != 1 && v.len() != n {
                return Err(Error::Config(format!(
                    "{name} has {} entries; expected 1 or {n}",
                    v.len()
                )));
            }
        }
        if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("Gaussian parameters must be finite with variance >= 0".into()));
        }
        schedule.validate()?;
        Ok(Self {
            mean,
            var,
            shape,
            schedule,
            domain,
        })
    }

    #[inline]
    fn mean_at(&self, i: usize) -> f64 {
        self.mean[if self.mean.len() == 1 { 0 } else { i }]
    }

    #[inline]
    fn var_at(&self, i: usize) -> f64 {
        self.var[if self.var.len() == 1 { 0 } else { i }]
    }

    pub fn mean_image(&self) -> Image {
        let (h, w, c) = self.shape;
        let data = (0..h * w * c).map(|i| self.mean_at(i)).collect();
        Image::from_vec(h, w, c, data).expect("shape matches")
    }

    pub fn var_image(&self) -> Image {
        let (h, w, c) = self.shape;
        let data = (0..h * w * c).map(|i| self.var_at(i)).collect();
        Image::from_vec(h, w, c, data).expect("shape matches")
    }
}

impl ScoreModel for AnalyticGaussian {
    fn predict_eps(&self, x_t: &Image, _condition: Option<&Condition>, t: usize) -> Result<Image> {
        if x_t.shape() != self.shape {
            return Err(Error::Shape {
                expected: self.shape,
                actual: x_t.shape(),
            });
        }
        let ab = *self
            .schedule
            .alpha_bar
            .get(t)
            .ok_or_else(|| Error::Contract(format!("timestep {t} outside schedule")))?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let denom = ab * self.var_at(i) + 1.0 - ab;
                if denom == 0.0 {
                    0.0
                } else {
                    sn * (x - sa * self.mean_at(i)) / denom
                }
            })
            .collect();
        Image::from_vec(self.shape.0, self.shape.1, self.shape.2, data)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn value_domain(&self) -> ValueDomain {
        self.domain
    }

    fn resolution(&self) -> Option<Shape> {
        Some(self.shape)
    }

    fn describe(&self) -> String {
        format!(
            "analytic gaussian {}x{}x{} ({} mean values, {} variances)",
            self.shape.0,
            self.shape.1,
            self.shape.2,
            self.mean.len(),
            self.var.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{make_schedule, posterior_x0, ScheduleKind};

    #[test]
    fn delta_distribution_estimates_its_mean() {
        let s = make_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let m = AnalyticGaussian::new(vec![0.3], vec![0.0], (2, 2, 1), s.clone(), ValueDomain::Unit).unwrap();
        for t in [0, 50, 99] {
            let x = Image::from_fn(2, 2, 1, |y, x, _| (y as f64 - x as f64) * 1.7 + 0.1);
            let eps = m.predict_eps(&x, None, t).unwrap();
            let est = posterior_x0(&x, &eps, t, &s, ValueDomain::Unbounded).unwrap();
            for v in est.data() {
                assert!((v - 0.3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn estimate_approaches_mean_with_noise_level() {
        // x0_hat = mu + k(t) (x_t / sqrt(abar) - mu); the gain k shrinks to 0
        let s = make_schedule(200, ScheduleKind::LinearBeta).unwrap();
        let m = AnalyticGaussian::new(vec![0.5], vec![0.04], (1, 1, 1), s.clone(), ValueDomain::Unbounded).unwrap();
        let est = |x: f64, t: usize| {
            let x = Image::filled(1, 1, 1, x);
            let eps = m.predict_eps(&x, None, t).unwrap();
            posterior_x0(&x, &eps, t, &s, ValueDomain::Unbounded).unwrap().get(0, 0, 0)
        };
        let mut prev = f64::INFINITY;
        for t in (0..200).step_by(10) {
            let ab = s.alpha_bar[t];
            let gain = (est(0.3, t) - est(-0.3, t)) * ab.sqrt() / 0.6;
            assert!(gain < prev, "gain rose at t={t}");
            prev = gain;
        }
        assert!(prev < 0.01);
        let ab = s.alpha_bar[199];
        assert!((est(ab.sqrt() * 0.5, 199) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = make_schedule(10, ScheduleKind::LinearBeta).unwrap();
        assert!(AnalyticGaussian::new(vec![0.0; 3], vec![1.0], (2, 2, 1), s.clone(), ValueDomain::Unit).is_err());
        assert!(AnalyticGaussian::new(vec![0.0], vec![-1.0], (2, 2, 1), s, ValueDomain::Unit).is_err());
    }
}

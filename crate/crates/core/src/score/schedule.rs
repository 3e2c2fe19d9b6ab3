use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta endpoints used by [`ScheduleKind::LinearBeta`].
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::LinearBeta => "linear_beta",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear_beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Config(format!("unknown schedule kind '{s}'"))),
        }
    }
}

/// Discrete noise schedule. Index `t` in `0..len()` is the noise level of
/// the `t + 1`-th forward step, so `alpha_bar[0]` is close to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha[t]
    }

    fn from_betas(kind: ScheduleKind, betas: impl IntoIterator<Item = f64>) -> Self {
        let alpha: Vec<f64> = betas.into_iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self {
            kind,
            alpha,
            alpha_bar,
        }
    }

    /// Evenly spaced subset of `steps` timesteps (always including the first
    /// and last), with per-step alphas recomputed so the cumulative products
    /// are preserved. Returns the new schedule and the original indices.
    pub fn respace(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let n = self.len();
        if steps == 0 || steps > n {
            return Err(Error::Config(format!(
                "cannot sample with {steps} steps from a {n}-step schedule"
            )));
        }
        if steps == n {
            return Ok((self.clone(), (0..n).collect()));
        }
        let timesteps: Vec<usize> = if steps == 1 {
            vec![n - 1]
        } else {
            (0..steps)
                .map(|k| ((k as f64) * (n - 1) as f64 / (steps - 1) as f64).round() as usize)
                .collect()
        };
        let alpha_bar: Vec<f64> = timesteps.iter().map(|&t| self.alpha_bar[t]).collect();
        let alpha = alpha_bar
            .iter()
            .enumerate()
            .map(|(k, &ab)| if k == 0 { ab } else { ab / alpha_bar[k - 1] })
            .collect();
        Ok((
            NoiseSchedule {
                kind: self.kind,
                alpha,
                alpha_bar,
            },
            timesteps,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.len() != self.alpha_bar.len() {
            return Err(Error::Contract("malformed noise schedule".into()));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Contract("schedule alphas must lie in (0, 1)".into()));
        }
        if self.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Contract("alpha_bar must be strictly decreasing".into()));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Contract("a schedule needs at least one step".into()));
    }
    let schedule = match kind {
        ScheduleKind::LinearBeta => {
            let span = (steps - 1).max(1) as f64;
            NoiseSchedule::from_betas(
                kind,
                (0..steps).map(|t| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * t as f64 / span),
            )
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let f0 = f(0.0);
            NoiseSchedule::from_betas(
                kind,
                (0..steps).map(|t| {
                    let ab = f((t + 1) as f64) / f0;
                    let prev = f(t as f64) / f0;
                    (1.0 - ab / prev).clamp(1e-8, MAX_BETA)
                }),
            )
        }
    };
    schedule.validate()?;
    Ok(schedule)
}

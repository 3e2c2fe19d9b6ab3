//! Fusing a bracket stack into linear radiance, and a simple display
//! operator.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::consistency::BracketStack;
use crate::error::{Error, Result};
use crate::image::{HdrImage, Image, LdrImage};
use crate::radiometry::Crf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// Tent `min(v, 1 - v)`.
    Hat,
    /// Flat top with linear shoulders of width [`TRAPEZOID_RAMP`].
    Trapezoid,
}

pub const TRAPEZOID_RAMP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeWeightSpec {
    pub kind: WeightKind,
    pub low_cut: f64,
    pub high_cut: f64,
}

impl Default for MergeWeightSpec {
    fn default() -> Self {
        Self {
            kind: WeightKind::Hat,
            low_cut: 0.05,
            high_cut: 0.95,
        }
    }
}

impl MergeWeightSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.low_cut) || !(self.high_cut > self.low_cut && self.high_cut <= 1.0) {
            return Err(Error::Config(format!(
                "merge cuts must satisfy 0 <= low < 0.5 and low < high <= 1, got {} and {}",
                self.low_cut, self.high_cut
            )));
        }
        Ok(())
    }
}

/// Reliability of an encoded value; zero outside `(low_cut, high_cut)`.
pub fn weight(v: f64, spec: &MergeWeightSpec) -> f64 {
    if !(v > spec.low_cut && v < spec.high_cut) {
        return 0.0;
    }
    match spec.kind {
        WeightKind::Hat => v.min(1.0 - v).max(0.0),
        WeightKind::Trapezoid => ((v - spec.low_cut).min(spec.high_cut - v) / TRAPEZOID_RAMP).min(1.0),
    }
}

/// Weighted average of `invCRF(v) / 2^ev` over brackets, per sample.
///
/// Samples that no bracket exposes reliably take the darkest bracket when
/// it is bright there (clipped highlights) and the brightest bracket
/// otherwise (crushed shadows).
pub fn merge_stack(stack: &BracketStack, crf: &Crf, spec: &MergeWeightSpec) -> Result<HdrImage> {
    spec.validate()?;
    let brackets = stack.brackets();
    if brackets.is_empty() {
        return Err(Error::Contract("cannot merge an empty stack".into()));
    }
    let (h, w, c) = stack.shape();
    let scales: Vec<f64> = brackets.iter().map(|b| (-b.ev).exp2()).collect();
    let darkest = &brackets[0];
    let brightest = &brackets[brackets.len() - 1];
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h * w * c {
        let (mut num, mut den) = (0.0, 0.0);
        for (b, s) in brackets.iter().zip(&scales) {
            let v = b.image.data()[i];
            let wt = weight(v, spec);
            if wt > 0.0 {
                num += wt * crf.invert_scalar(v) * s;
                den += wt;
            }
        }
        let rad = if den > 0.0 {
            num / den
        } else {
            let vd = darkest.image.data()[i];
            if vd >= spec.high_cut {
                crf.invert_scalar(vd) * scales[0]
            } else {
                crf.invert_scalar(brightest.image.data()[i]) * scales[scales.len() - 1]
            }
        };
        out.push(rad.max(0.0));
    }
    HdrImage::new(Image::from_vec(h, w, c, out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToneMapKind {
    /// `x / (1 + x)` on exposure-scaled radiance, then the CRF.
    ReinhardGamma,
}

/// Display rendering of radiance at a manual exposure multiplier.
pub fn tonemap(hdr: &HdrImage, exposure: f64, kind: ToneMapKind, crf: &Crf) -> Result<LdrImage> {
    if !(exposure.is_finite() && exposure > 0.0) {
        return Err(Error::Config(format!("exposure must be positive, got {exposure}")));
    }
    match kind {
        ToneMapKind::ReinhardGamma => Ok(LdrImage::from_clamped(hdr.image().map(|r| {
            let x = r * exposure;
            crf.apply_scalar((x / (1.0 + x)).clamp(0.0, 1.0))
        }))),
    }
}

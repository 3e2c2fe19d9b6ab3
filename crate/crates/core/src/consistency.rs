//! Bracket-consistency residuals and the posterior cost terms.
//!
//! Every norm here is a root-mean-square over pixels and channels, so the
//! cost weights do not depend on resolution. Gradients are taken with
//! respect to the bracket being optimized only; the reference bracket is a
//! constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::{soft_histogram, soft_histogram_vjp, HistogramVec, SoftHistogramSpec};
use crate::image::{Image, LdrImage, Shape};
use crate::radiometry::{ev_ratio, Crf, ExposureBracket};

/// Ordered exposure brackets of one scene, including the EV+0 bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketStack {
    brackets: Vec<ExposureBracket>,
    ev0_index: usize,
}

impl BracketStack {
    pub fn new(brackets: Vec<ExposureBracket>) -> Result<Self> {
        let first = brackets
            .first()
            .ok_or_else(|| Error::Contract("bracket stack is empty".into()))?;
        let shape = first.image.shape();
        for w in brackets.windows(2) {
            if w[1].ev <= w[0].ev {
                return Err(Error::Contract(format!(
                    "exposure values must be strictly increasing, got {} then {}",
                    w[0].ev, w[1].ev
                )));
            }
        }
        for b in &brackets {
            if b.image.shape() != shape {
                return Err(Error::Shape {
                    expected: shape,
                    actual: b.image.shape(),
                });
            }
        }
        let ev0_index = brackets
            .iter()
            .position(|b| b.ev == 0.0)
            .ok_or_else(|| Error::Contract("bracket stack has no EV+0 bracket".into()))?;
        Ok(Self {
            brackets,
            ev0_index,
        })
    }

    pub fn brackets(&self) -> &[ExposureBracket] {
        &self.brackets
    }

    pub fn into_brackets(self) -> Vec<ExposureBracket> {
        self.brackets
    }

    pub fn len(&self) -> usize {
        self.brackets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.brackets.is_empty()
    }

    pub fn ev0_index(&self) -> usize {
        self.ev0_index
    }

    pub fn ev0(&self) -> &ExposureBracket {
        &self.brackets[self.ev0_index]
    }

    pub fn shape(&self) -> Shape {
        self.brackets[0].image.shape()
    }

    pub fn evs(&self) -> Vec<f64> {
        self.brackets.iter().map(|b| b.ev).collect()
    }

    /// Bracket at a signed offset from EV+0, as used by the cost dispatch.
    pub fn at_offset(&self, offset: isize) -> Option<&ExposureBracket> {
        let pos = self.ev0_index as isize + offset;
        if pos < 0 {
            return None;
        }
        self.brackets.get(pos as usize)
    }

    /// Signed offsets from EV+0 of every bracket, ascending.
    pub fn offsets(&self) -> impl Iterator<Item = isize> + '_ {
        (0..self.brackets.len()).map(move |i| i as isize - self.ev0_index as isize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    /// Weight of the unsaturated term when lowering exposure.
    pub lambda_s: f64,
    /// Weight of the bright-region term when raising exposure.
    pub lambda_d: f64,
    /// Weight of the optional term on the EV+0 bracket.
    pub lambda_c: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_d: 2.0,
            lambda_c: 10.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_d", self.lambda_d),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// What, if anything, the EV+0 bracket is guided towards.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GuidanceTarget {
    #[default]
    None,
    /// Identity guidance towards an LDR image.
    Image(LdrImage),
    /// Soft-histogram guidance towards a target histogram.
    Histogram {
        target: HistogramVec,
        spec: SoftHistogramSpec,
    },
}

impl GuidanceTarget {
    pub fn is_none(&self) -> bool {
        matches!(self, GuidanceTarget::None)
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            GuidanceTarget::None => "none",
            GuidanceTarget::Image(_) => "image",
            GuidanceTarget::Histogram { .. } => "histogram",
        }
    }
}

/// Root-mean-square norm.
pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// `d rms(v) / d v_j`, taken as zero at the origin.
fn rms_grad(v: &[f64]) -> Vec<f64> {
    let n = rms(v);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    let scale = 1.0 / (n * v.len() as f64);
    v.iter().map(|x| x * scale).collect()
}

fn residual(reference: &[f64], target: &[f64], ratio: f64, crf: &Crf) -> Vec<f64> {
    reference
        .iter()
        .zip(target)
        .map(|(&r, &x)| crf.re_expose_scalar(r, ratio) - x)
        .collect()
}

/// Re-exposes `reference` to the exposure of `target` and subtracts `target`.
pub fn braco(reference: &ExposureBracket, target: &ExposureBracket, crf: &Crf) -> Result<Image> {
    reference.image.ensure_same_shape(&target.image)?;
    let ratio = ev_ratio(target.ev, reference.ev);
    let r = residual(reference.image.data(), target.image.data(), ratio, crf);
    let (h, w, c) = reference.image.shape();
    Image::from_vec(h, w, c, r)
}

fn down_terms(x: &[f64], reference: &[f64], ratio: f64, lambda_s: f64, crf: &Crf, grad: bool) -> (f64, Option<Vec<f64>>) {
    let r = residual(reference, x, ratio, crf);
    let a: Vec<f64> = reference.iter().zip(&r).map(|(&s, &r)| s * r.max(0.0)).collect();
    let b: Vec<f64> = reference.iter().zip(&r).map(|(&s, &r)| (1.0 - s) * r).collect();
    let value = rms(&a) + lambda_s * rms(&b);
    let g = grad.then(|| {
        let ga = rms_grad(&a);
        let gb = rms_grad(&b);
        (0..x.len())
            .map(|j| {
                let s = reference[j];
                // the max kink takes the zero subgradient
                let da = if r[j] > 0.0 { -s } else { 0.0 };
                ga[j] * da - lambda_s * gb[j] * (1.0 - s)
            })
            .collect()
    });
    (value, g)
}

fn up_terms(x: &[f64], reference: &[f64], ratio: f64, lambda_d: f64, crf: &Crf, grad: bool) -> (f64, Option<Vec<f64>>) {
    let r = residual(reference, x, ratio, crf);
    let a: Vec<f64> = reference.iter().zip(&r).map(|(&v, &r)| (1.0 - v) * r).collect();
    let b: Vec<f64> = reference.iter().zip(&r).map(|(&v, &r)| v * r).collect();
    let value = rms(&a) + lambda_d * rms(&b);
    let g = grad.then(|| {
        let ga = rms_grad(&a);
        let gb = rms_grad(&b);
        (0..x.len())
            .map(|j| {
                let d = 1.0 - reference[j];
                -ga[j] * d - lambda_d * gb[j] * (1.0 - d)
            })
            .collect()
    });
    (value, g)
}

fn check_pair(x_i: &ExposureBracket, reference: &ExposureBracket) -> Result<()> {
    x_i.image.ensure_same_shape(&reference.image)
}

/// Cost for a bracket darker than its reference.
pub fn cost_down(x_i: &ExposureBracket, reference: &ExposureBracket, weights: &CostWeights, crf: &Crf) -> Result<f64> {
    Ok(cost_down_with_grad(x_i, reference, weights, crf, false)?.0)
}

/// Cost for a bracket brighter than its reference.
pub fn cost_up(x_i: &ExposureBracket, reference: &ExposureBracket, weights: &CostWeights, crf: &Crf) -> Result<f64> {
    Ok(cost_up_with_grad(x_i, reference, weights, crf, false)?.0)
}

fn cost_down_with_grad(
    x_i: &ExposureBracket,
    reference: &ExposureBracket,
    weights: &CostWeights,
    crf: &Crf,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_pair(x_i, reference)?;
    if x_i.ev >= reference.ev {
        return Err(Error::Contract(format!(
            "downward cost needs a darker bracket: EV {} is not below reference EV {}",
            x_i.ev, reference.ev
        )));
    }
    let ratio = ev_ratio(x_i.ev, reference.ev);
    Ok(down_terms(x_i.image.data(), reference.image.data(), ratio, weights.lambda_s, crf, grad))
}

fn cost_up_with_grad(
    x_i: &ExposureBracket,
    reference: &ExposureBracket,
    weights: &CostWeights,
    crf: &Crf,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_pair(x_i, reference)?;
    if x_i.ev <= reference.ev {
        return Err(Error::Contract(format!(
            "upward cost needs a brighter bracket: EV {} is not above reference EV {}",
            x_i.ev, reference.ev
        )));
    }
    let ratio = ev_ratio(x_i.ev, reference.ev);
    Ok(up_terms(x_i.image.data(), reference.image.data(), ratio, weights.lambda_d, crf, grad))
}

/// Optional term pulling the EV+0 bracket towards the guide.
pub fn cost_main(x0: &ExposureBracket, target: &GuidanceTarget, weights: &CostWeights) -> Result<f64> {
    Ok(cost_main_with_grad(x0, target, weights, false)?.0)
}

fn cost_main_with_grad(
    x0: &ExposureBracket,
    target: &GuidanceTarget,
    weights: &CostWeights,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if x0.ev != 0.0 {
        return Err(Error::Contract(format!("main cost applies to EV+0, got EV {}", x0.ev)));
    }
    match target {
        GuidanceTarget::None => Err(Error::Contract("main cost requested without a guidance target".into())),
        GuidanceTarget::Image(y) => {
            x0.image.ensure_same_shape(y)?;
            let d: Vec<f64> = x0.image.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
            let value = weights.lambda_c * rms(&d);
            let g = grad.then(|| rms_grad(&d).into_iter().map(|v| v * weights.lambda_c).collect());
            Ok((value, g))
        }
        GuidanceTarget::Histogram { target, spec } => {
            if target.bins != spec.bins || target.num_channels() != x0.image.channels() {
                return Err(Error::Contract(format!(
                    "histogram target is {}x{}, image gives {}x{}",
                    target.num_channels(),
                    target.bins,
                    x0.image.channels(),
                    spec.bins
                )));
            }
            let h = soft_histogram(x0.image.image(), spec)?;
            let d: Vec<f64> = h.flat().iter().zip(target.flat()).map(|(a, b)| a - b).collect();
            let value = weights.lambda_c * rms(&d);
            let g = grad.then(|| {
                let up: Vec<f64> = rms_grad(&d).into_iter().map(|v| v * weights.lambda_c).collect();
                soft_histogram_vjp(x0.image.image(), spec, &up).into_vec()
            });
            Ok((value, g))
        }
    }
}

fn dispatch(
    offset: isize,
    stack: &BracketStack,
    target: &GuidanceTarget,
    weights: &CostWeights,
    crf: &Crf,
    grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let x_i = stack
        .at_offset(offset)
        .ok_or_else(|| Error::Contract(format!("no bracket at offset {offset} from EV+0")))?;
    match offset {
        0 if target.is_none() => Ok((0.0, grad.then(|| vec![0.0; x_i.image.len()]))),
        0 => cost_main_with_grad(x_i, target, weights, grad),
        o if o < 0 => {
            let reference = stack.at_offset(o + 1).expect("neighbour towards EV+0 exists");
            cost_down_with_grad(x_i, reference, weights, crf, grad)
        }
        o => {
            let reference = stack.at_offset(o - 1).expect("neighbour towards EV+0 exists");
            cost_up_with_grad(x_i, reference, weights, crf, grad)
        }
    }
}

/// Per-bracket cost. Negative offsets are compared against their brighter
/// neighbour, positive offsets against their darker neighbour, and EV+0
/// against the guidance target (zero when there is none).
pub fn total_cost(
    offset: isize,
    stack: &BracketStack,
    target: &GuidanceTarget,
    weights: &CostWeights,
    crf: &Crf,
) -> Result<f64> {
    Ok(dispatch(offset, stack, target, weights, crf, false)?.0)
}

/// Gradient of [`total_cost`] with respect to the pixels of the bracket at
/// `offset`, holding every other bracket fixed.
pub fn grad_total_cost(
    offset: isize,
    stack: &BracketStack,
    target: &GuidanceTarget,
    weights: &CostWeights,
    crf: &Crf,
) -> Result<Image> {
    let (value, g) = dispatch(offset, stack, target, weights, crf, true)?;
    debug_assert!(value.is_finite());
    let (h, w, c) = stack.shape();
    Image::from_vec(h, w, c, g.expect("gradient requested"))
}

/// Cost value and gradient in one pass.
pub fn total_cost_and_grad(
    offset: isize,
    stack: &BracketStack,
    target: &GuidanceTarget,
    weights: &CostWeights,
    crf: &Crf,
) -> Result<(f64, Image)> {
    let (value, g) = dispatch(offset, stack, target, weights, crf, true)?;
    let (h, w, c) = stack.shape();
    Ok((value, Image::from_vec(h, w, c, g.expect("gradient requested"))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn b(v: f64, ev: f64) -> ExposureBracket {
        ExposureBracket::new(LdrImage::filled(2, 2, 1, v).unwrap(), ev).unwrap()
    }

    fn img(vals: &[f64], ev: f64) -> ExposureBracket {
        let im = Image::from_vec(1, vals.len(), 1, vals.to_vec()).unwrap();
        ExposureBracket::new(LdrImage::new(im).unwrap(), ev).unwrap()
    }

    #[test]
    fn stack_validation() {
        assert!(BracketStack::new(vec![]).is_err());
        assert!(BracketStack::new(vec![b(0.5, -1.0), b(0.5, 1.0)]).is_err());
        assert!(BracketStack::new(vec![b(0.5, 0.0), b(0.5, -1.0)]).is_err());
        let mismatched = ExposureBracket::new(LdrImage::filled(3, 2, 1, 0.5).unwrap(), 1.0).unwrap();
        assert!(matches!(
            BracketStack::new(vec![b(0.5, 0.0), mismatched]),
            Err(Error::Shape { .. })
        ));
        let s = BracketStack::new(vec![b(0.1, -2.0), b(0.5, 0.0), b(0.9, 2.0)]).unwrap();
        assert_eq!(s.ev0_index(), 1);
        assert_eq!(s.at_offset(-1).unwrap().ev, -2.0);
        assert!(s.at_offset(2).is_none());
    }

    #[test]
    fn braco_examples() {
        let id = Crf::identity();
        let r = braco(&b(1.0, 0.0), &b(0.6, -1.0), &id).unwrap();
        assert_abs_diff_eq!(r.get(0, 0, 0), -0.1, epsilon = 1e-12);
        let r = braco(&b(1.0, 0.0), &b(0.3, -1.0), &id).unwrap();
        assert_abs_diff_eq!(r.get(0, 0, 0), 0.2, epsilon = 1e-12);

        let crf = Crf::default();
        let reference = img(&[0.1, 0.4, 0.8, 1.0], 0.0);
        let consistent = ExposureBracket::new(crate::radiometry::re_expose(&reference, -2.0, &crf), -2.0).unwrap();
        let r = braco(&reference, &consistent, &crf).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert!(braco(&reference, &b(0.5, -1.0), &crf).is_err());
    }

    #[test]
    fn cost_down_saturated_reference() {
        let id = Crf::identity();
        let w = CostWeights::default();
        // saturated reference: the unsaturated term vanishes and 0.6 is feasible
        assert_eq!(cost_down(&b(0.6, -1.0), &b(1.0, 0.0), &w, &id).unwrap(), 0.0);
        let c = cost_down(&b(0.3, -1.0), &b(1.0, 0.0), &w, &id).unwrap();
        assert_abs_diff_eq!(c, 0.2, epsilon = 1e-12);
        assert!(cost_down(&b(0.3, 1.0), &b(1.0, 0.0), &w, &id).is_err());
    }

    #[test]
    fn cost_up_weighting() {
        let id = Crf::identity();
        let w = CostWeights::default();
        // dark reference: only the unit-weight term sees the residual
        let dark = cost_up(&b(0.3, 1.0), &b(0.0, 0.0), &w, &id).unwrap();
        assert_abs_diff_eq!(dark, 0.3, epsilon = 1e-12);
        // bright reference: residual weighted by lambda_d
        let bright = cost_up(&b(0.7, 1.0), &b(1.0, 0.0), &w, &id).unwrap();
        assert_abs_diff_eq!(bright, 2.0 * 0.3, epsilon = 1e-12);
        assert_eq!(cost_up(&b(0.5, 1.0), &b(0.25, 0.0), &w, &id).unwrap(), 0.0);
        assert!(cost_up(&b(0.5, -1.0), &b(0.25, 0.0), &w, &id).is_err());
    }

    #[test]
    fn cost_main_examples() {
        let w = CostWeights::default();
        let y = LdrImage::filled(2, 2, 1, 0.25).unwrap();
        let c = cost_main(&b(0.5, 0.0), &GuidanceTarget::Image(y.clone()), &w).unwrap();
        assert_abs_diff_eq!(c, 2.5, epsilon = 1e-12);
        assert_eq!(cost_main(&b(0.25, 0.0), &GuidanceTarget::Image(y), &w).unwrap(), 0.0);
        assert!(cost_main(&b(0.25, 0.0), &GuidanceTarget::None, &w).is_err());

        let x = img(&[0.05, 0.55, 0.95, 0.35], 0.0);
        let spec = SoftHistogramSpec::with_bins(10);
        let h = soft_histogram(x.image.image(), &spec).unwrap();
        let t = GuidanceTarget::Histogram { target: h, spec };
        assert_abs_diff_eq!(cost_main(&x, &t, &w).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dispatch_matches_standalone_costs() {
        let crf = Crf::default();
        let w = CostWeights::default();
        let s = BracketStack::new(vec![
            img(&[0.2, 0.5, 0.7], -1.0),
            img(&[0.3, 0.9, 1.0], 0.0),
            img(&[0.6, 0.8, 0.95], 1.0),
        ])
        .unwrap();
        let t = GuidanceTarget::None;
        assert_eq!(
            total_cost(-1, &s, &t, &w, &crf).unwrap(),
            cost_down(&s.brackets()[0], &s.brackets()[1], &w, &crf).unwrap()
        );
        assert_eq!(
            total_cost(1, &s, &t, &w, &crf).unwrap(),
            cost_up(&s.brackets()[2], &s.brackets()[1], &w, &crf).unwrap()
        );
        assert_eq!(total_cost(0, &s, &t, &w, &crf).unwrap(), 0.0);
        assert!(total_cost(2, &s, &t, &w, &crf).is_err());
        assert!(grad_total_cost(0, &s, &t, &w, &crf).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_residual_has_zero_gradient() {
        let crf = Crf::default();
        let w = CostWeights::default();
        let ev0 = img(&[0.2, 0.5, 0.7, 0.9], 0.0);
        let down = ExposureBracket::new(crate::radiometry::re_expose(&ev0, -2.0, &crf), -2.0).unwrap();
        let up = ExposureBracket::new(crate::radiometry::re_expose(&ev0, 2.0, &crf), 2.0).unwrap();
        let s = BracketStack::new(vec![down, ev0, up]).unwrap();
        for o in [-1, 1] {
            assert_eq!(total_cost(o, &s, &GuidanceTarget::None, &w, &crf).unwrap(), 0.0);
            let g = grad_total_cost(o, &s, &GuidanceTarget::None, &w, &crf).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn max_branch_gradient_vanishes_in_feasible_region() {
        let id = Crf::identity();
        let w = CostWeights::default();
        let s = BracketStack::new(vec![img(&[0.6, 0.8], -1.0), img(&[1.0, 1.0], 0.0)]).unwrap();
        let g = grad_total_cost(-1, &s, &GuidanceTarget::None, &w, &id).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

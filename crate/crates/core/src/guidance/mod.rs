//! Coupled multi-bracket posterior sampling.
//!
//! Every bracket runs its own ancestral chain on the black-box model. At
//! each step the clean-sample estimates of all brackets are decoded to
//! display space, the per-bracket consistency cost is differentiated with
//! the neighbours held fixed, and the gradient steers the update.

mod latent;
mod manifest;
mod tiling;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{total_cost_and_grad, BracketStack, CostWeights, GuidanceTarget};
use crate::error::{Error, Result};
use crate::image::{Image, LdrImage, Shape};
use crate::radiometry::{Crf, ExposureBracket};
use crate::score::{posterior_x0, Condition, NoiseSchedule, ScoreModel, ValueDomain};

pub use latent::{latent_dps_step, latent_guidance_gradient, sample_brackets_latent, DecoderModel, IdentityDecoder, LinearDecoder};
pub use manifest::{RunManifest, MANIFEST_VERSION};
pub use tiling::{tile_offsets, tiled_sample};

use latent::DomainDecoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Constant,
    TimeQuadratic,
}

/// How the cost gradient enters the ancestral update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceForm {
    /// Subtract `lambda * grad` from the score, with the gradient carried
    /// from the estimate to `x_t` through `1 / sqrt(abar)`.
    Score,
    /// Shift the clean-sample estimate by `-lambda * grad` and propagate
    /// the shift through the ancestral posterior mean.
    Estimate,
}

pub const DEFAULT_EVS: [f64; 5] = [-4.0, -2.0, 0.0, 2.0, 4.0];
pub const DEFAULT_LAMBDA_CONSTANT: f64 = 1.5;
pub const DEFAULT_LAMBDA_QUADRATIC: f64 = 6.0;
pub const DEFAULT_LAMBDA_LATENT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub evs: Vec<f64>,
    /// Sampling steps; `None` runs the model's full schedule.
    pub steps: Option<usize>,
    pub lambda_mode: LambdaMode,
    pub lambda0: f64,
    pub form: GuidanceForm,
    pub weights: CostWeights,
    pub crf: Crf,
    pub seed: u64,
    pub fix_ev0: bool,
    pub condition: Option<Condition>,
    pub target: GuidanceTarget,
    /// Forces single-threaded evaluation of per-bracket work.
    pub serial: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            evs: DEFAULT_EVS.to_vec(),
            steps: None,
            lambda_mode: LambdaMode::TimeQuadratic,
            lambda0: DEFAULT_LAMBDA_QUADRATIC,
            form: GuidanceForm::Estimate,
            weights: CostWeights::default(),
            crf: Crf::default(),
            seed: 0,
            fix_ev0: false,
            condition: None,
            target: GuidanceTarget::None,
            serial: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.evs.is_empty() || self.evs.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("exposure values must be finite and non-empty".into()));
        }
        if self.evs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("exposure values must be strictly increasing".into()));
        }
        if !self.evs.contains(&0.0) {
            return Err(Error::Config("exposure values must include 0".into()));
        }
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return Err(Error::Config(format!("lambda0 must be finite and >= 0, got {}", self.lambda0)));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        self.weights.validate()?;
        if self.fix_ev0 && !matches!(self.target, GuidanceTarget::Image(_)) {
            return Err(Error::Config("fixing EV+0 requires an image target".into()));
        }
        Ok(())
    }

    pub fn ev0_index(&self) -> usize {
        self.evs.iter().position(|e| *e == 0.0).unwrap_or(0)
    }
}

/// Guidance weight at sampler time `t` of `total` (`t = total` is pure noise).
pub fn lambda_at(t: usize, total: usize, mode: LambdaMode, lambda0: f64) -> f64 {
    match mode {
        LambdaMode::Constant => lambda0,
        LambdaMode::TimeQuadratic => {
            if total == 0 {
                return lambda0;
            }
            let r = 1.0 - t as f64 / total as f64;
            lambda0 * r * r
        }
    }
}

/// Per-bracket chain states at sampler time `t`; `t` counts down from the
/// number of sampling steps to 0.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub x: Vec<Image>,
    pub t: usize,
    pub rng: ChaCha8Rng,
    /// Display-space estimates from the most recent step.
    pub estimates: Option<Vec<LdrImage>>,
}

/// Schedule actually walked by the sampler.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub schedule: NoiseSchedule,
    /// Model timestep for each sampling index.
    pub timesteps: Vec<usize>,
}

impl SamplingPlan {
    pub fn new(model: &dyn ScoreModel, steps: Option<usize>) -> Result<Self> {
        let base = model.schedule();
        let (schedule, timesteps) = base.respace(steps.unwrap_or(base.len()))?;
        Ok(Self { schedule, timesteps })
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }
}

pub(crate) fn standard_normal_image(shape: Shape, rng: &mut ChaCha8Rng) -> Image {
    let (h, w, c) = shape;
    let data = (0..h * w * c).map(|_| StandardNormal.sample(rng)).collect();
    Image::from_vec(h, w, c, data).expect("shape matches")
}

/// Unguided ancestral update
/// `(x_t - beta / sqrt(1 - abar) eps) / sqrt(alpha) + sqrt(beta) z`
/// for sampling index `k`; `z` is ignored at `k = 0`.
pub fn ancestral_update(x_t: &Image, eps: &Image, k: usize, schedule: &NoiseSchedule, z: Option<&Image>) -> Result<Image> {
    let alpha = schedule.alpha[k];
    let beta = 1.0 - alpha;
    let ab = schedule.alpha_bar[k];
    let c_eps = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = x_t.zip_map(eps, |x, e| (x - c_eps * e) * inv)?;
    if k > 0 {
        if let Some(z) = z {
            let sigma = beta.sqrt();
            out = out.zip_map(z, |m, n| m + sigma * n)?;
        }
    }
    Ok(out)
}

/// Forward-noises the guide to the noise level `alpha_bar` in model
/// coordinates.
pub fn fix_ev0_projection(y: &LdrImage, alpha_bar: f64, z: &Image, domain: ValueDomain) -> Result<Image> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y.image().zip_map(z, |v, n| sa * domain.from_unit(v) + sn * n)
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub lambda: f64,
    /// Cost of each bracket at the estimates used for this step.
    pub costs: Vec<f64>,
}

/// Everything a step needs besides the chain states.
pub(crate) struct StepContext<'a> {
    pub model: &'a dyn ScoreModel,
    pub decoder: &'a dyn DecoderModel,
    pub cfg: &'a GuidanceConfig,
    pub plan: &'a SamplingPlan,
}

pub(crate) struct TileOutput {
    /// Update before noise is added.
    pub mean: Vec<Image>,
    pub estimates: Vec<LdrImage>,
    pub costs: Vec<f64>,
}

impl StepContext<'_> {
    fn parallel(&self) -> bool {
        !self.cfg.serial && self.model.concurrent_safe()
    }

    /// One guided step for one tile, without the noise term. `fixed`
    /// carries the guide for the EV+0 chain when it is pinned, cropped to
    /// the tile.
    pub fn step_tile(&self, xs: &[Image], t: usize, target: &GuidanceTarget, fixed: Option<&LdrImage>) -> Result<TileOutput> {
        let k = t - 1;
        let cfg = self.cfg;
        let domain = self.model.value_domain();
        let sched = &self.plan.schedule;
        let model_t = self.plan.timesteps[k];
        let ev0 = cfg.ev0_index();
        let pinned = |i: usize| fixed.is_some() && i == ev0;

        let predict = |i: usize| -> Result<Option<(Image, Image)>> {
            if pinned(i) {
                return Ok(None);
            }
            let eps = self.model.predict_eps(&xs[i], cfg.condition.as_ref(), model_t)?;
            if eps.shape() != xs[i].shape() {
                return Err(Error::Shape {
                    expected: xs[i].shape(),
                    actual: eps.shape(),
                });
            }
            let x0 = posterior_x0(&xs[i], &eps, k, sched, domain)?;
            Ok(Some((eps, x0)))
        };
        let preds: Vec<Option<(Image, Image)>> = if self.parallel() {
            (0..xs.len()).into_par_iter().map(predict).collect::<Result<_>>()?
        } else {
            (0..xs.len()).map(predict).collect::<Result<_>>()?
        };

        let estimates: Vec<LdrImage> = preds
            .iter()
            .map(|p| match p {
                None => Ok(fixed.expect("pinned bracket has a guide").clone()),
                Some((_, x0)) => Ok(LdrImage::from_clamped(self.decoder.decode(x0)?)),
            })
            .collect::<Result<_>>()?;
        for e in &estimates {
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("estimate at t={t}")));
            }
        }

        let lambda = lambda_at(t, self.plan.len(), cfg.lambda_mode, cfg.lambda0);
        // every bracket sees the estimates from the start of the step
        let stack = BracketStack::new(
            estimates
                .iter()
                .zip(&cfg.evs)
                .map(|(img, &ev)| ExposureBracket::new(img.clone(), ev))
                .collect::<Result<_>>()?,
        )?;
        let target_eff = if fixed.is_some() { &GuidanceTarget::None } else { target };

        let guided = |i: usize| -> Result<(f64, Option<Image>)> {
            let offset = i as isize - ev0 as isize;
            if pinned(i) || (offset == 0 && target_eff.is_none()) {
                return Ok((0.0, None));
            }
            let (cost, g) = total_cost_and_grad(offset, &stack, target_eff, &cfg.weights, &cfg.crf)?;
            if lambda == 0.0 {
                return Ok((cost, None));
            }
            let (_, x0) = preds[i].as_ref().expect("unpinned bracket was predicted");
            let decoded = self.decoder.decode(x0)?;
            // clamping after decoding blocks the gradient outside [0, 1];
            // scaling by N * cost turns the RMS gradient into a residual
            let mut scale = g.len() as f64 * cost;
            if offset == 0 {
                // the guide term has curvature lambda_c^2, so a plain step
                // overshoots the guide; damp it like an implicit step
                let c = cfg.weights.lambda_c;
                scale /= 1.0 + lambda * c * c;
            }
            let masked = g.zip_map(&decoded, |gv, d| if (0.0..=1.0).contains(&d) { gv * scale } else { 0.0 })?;
            Ok((cost, Some(self.decoder.vjp(x0, &masked)?)))
        };
        let grads: Vec<(f64, Option<Image>)> = if self.parallel() {
            (0..xs.len()).into_par_iter().map(guided).collect::<Result<_>>()?
        } else {
            (0..xs.len()).map(guided).collect::<Result<_>>()?
        };

        let ab = sched.alpha_bar[k];
        let alpha = sched.alpha[k];
        let beta = 1.0 - alpha;
        let ab_prev = if k == 0 { 1.0 } else { sched.alpha_bar[k - 1] };
        let mut mean = Vec::with_capacity(xs.len());
        let mut costs = Vec::with_capacity(xs.len());
        for (i, (cost, g)) in grads.into_iter().enumerate() {
            costs.push(cost);
            let Some((eps, _)) = &preds[i] else {
                // pinned chain: deterministic part of the projection
                let y = fixed.expect("pinned bracket has a guide");
                mean.push(y.image().map(|v| ab_prev.sqrt() * domain.from_unit(v)));
                continue;
            };
            let m = match (g, cfg.form) {
                (None, _) => ancestral_update(&xs[i], eps, k, sched, None)?,
                (Some(g), GuidanceForm::Score) => {
                    // s' = s - lambda g / sqrt(abar)  <=>  eps' = eps + sqrt(1-abar) lambda g / sqrt(abar)
                    let c = (1.0 - ab).sqrt() * lambda / ab.sqrt();
                    let eps_g = eps.zip_map(&g, |e, gv| e + c * gv)?;
                    ancestral_update(&xs[i], &eps_g, k, sched, None)?
                }
                (Some(g), GuidanceForm::Estimate) => {
                    let c = lambda * ab_prev.sqrt() * beta / (1.0 - ab);
                    ancestral_update(&xs[i], eps, k, sched, None)?.zip_map(&g, |m, gv| m - c * gv)?
                }
            };
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("bracket {i} update at t={t}")));
            }
            mean.push(m);
        }
        Ok(TileOutput {
            mean,
            estimates,
            costs,
        })
    }
}

/// Adds the step's noise to the deterministic part of the update.
pub(crate) fn add_noise(mean: &mut [Image], zs: &[Image], t: usize, plan: &SamplingPlan, pinned: Option<usize>) {
    let k = t - 1;
    if k == 0 {
        return;
    }
    let sigma = plan.schedule.beta(k).sqrt();
    let sn_prev = (1.0 - plan.schedule.alpha_bar[k - 1]).sqrt();
    for (i, (m, z)) in mean.iter_mut().zip(zs).enumerate() {
        let s = if Some(i) == pinned { sn_prev } else { sigma };
        m.data_mut().iter_mut().zip(z.data()).for_each(|(a, b)| *a += s * b);
    }
}

pub(crate) fn model_shape(model: &dyn ScoreModel) -> Result<Shape> {
    model
        .resolution()
        .ok_or_else(|| Error::Capability("model does not report a native resolution".into()))
}

fn guide_of(cfg: &GuidanceConfig) -> Option<&LdrImage> {
    match (&cfg.target, cfg.fix_ev0) {
        (GuidanceTarget::Image(y), true) => Some(y),
        _ => None,
    }
}

fn check_target_shape(cfg: &GuidanceConfig, shape: Shape) -> Result<()> {
    if let GuidanceTarget::Image(y) = &cfg.target {
        if y.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: y.shape(),
            });
        }
    }
    Ok(())
}

/// Initial unit-Gaussian chains, one per bracket in EV order.
pub fn init_state(model: &dyn ScoreModel, cfg: &GuidanceConfig) -> Result<SamplerState> {
    cfg.validate()?;
    let shape = model_shape(model)?;
    check_target_shape(cfg, shape)?;
    let plan = SamplingPlan::new(model, cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<Image> = cfg.evs.iter().map(|_| standard_normal_image(shape, &mut rng)).collect();
    if let Some(y) = guide_of(cfg) {
        let i = cfg.ev0_index();
        let ab = plan.schedule.alpha_bar[plan.len() - 1];
        x[i] = fix_ev0_projection(y, ab, &x[i], model.value_domain())?;
    }
    Ok(SamplerState {
        x,
        t: plan.len(),
        rng,
        estimates: None,
    })
}

/// Advances every bracket chain from `state.t` to `state.t - 1`.
pub fn dps_step(state: &mut SamplerState, model: &dyn ScoreModel, cfg: &GuidanceConfig) -> Result<StepRecord> {
    let plan = SamplingPlan::new(model, cfg.steps)?;
    let decoder = DomainDecoder(model.value_domain());
    let ctx = StepContext {
        model,
        decoder: &decoder,
        cfg,
        plan: &plan,
    };
    step_state(&ctx, state)
}

pub(crate) fn step_state(ctx: &StepContext<'_>, state: &mut SamplerState) -> Result<StepRecord> {
    let t = state.t;
    if t == 0 || t > ctx.plan.len() {
        return Err(Error::Contract(format!("cannot step from t={t}")));
    }
    if state.x.len() != ctx.cfg.evs.len() {
        return Err(Error::Contract("state and configuration disagree on bracket count".into()));
    }
    let fixed = guide_of(ctx.cfg);
    let out = ctx.step_tile(&state.x, t, &ctx.cfg.target, fixed)?;
    let mut mean = out.mean;
    if t > 1 {
        let shape = state.x[0].shape();
        let zs: Vec<Image> = (0..mean.len()).map(|_| standard_normal_image(shape, &mut state.rng)).collect();
        add_noise(&mut mean, &zs, t, ctx.plan, fixed.map(|_| ctx.cfg.ev0_index()));
    }
    state.x = mean;
    state.t = t - 1;
    state.estimates = Some(out.estimates);
    Ok(StepRecord {
        t,
        lambda: lambda_at(t, ctx.plan.len(), ctx.cfg.lambda_mode, ctx.cfg.lambda0),
        costs: out.costs,
    })
}

/// Maps finished chains to display space and assembles the stack.
pub(crate) fn finish(xs: Vec<Image>, cfg: &GuidanceConfig, decoder: &dyn DecoderModel, domain: ValueDomain) -> Result<BracketStack> {
    let fixed = guide_of(cfg);
    let ev0 = cfg.ev0_index();
    let brackets = xs
        .into_iter()
        .zip(&cfg.evs)
        .enumerate()
        .map(|(i, (x, &ev))| {
            let img = match fixed {
                Some(y) if i == ev0 => y.clone(),
                _ => LdrImage::from_clamped(decoder.decode(&x.map(|v| domain.clamp(v)))?),
            };
            ExposureBracket::new(img, ev)
        })
        .collect::<Result<_>>()?;
    BracketStack::new(brackets)
}

/// Result of a full sampling run.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub stack: BracketStack,
    pub steps: Vec<StepRecord>,
    pub seconds: f64,
}

/// Runs the coupled sampler from noise to a bracket stack.
pub fn sample_brackets(model: &dyn ScoreModel, cfg: &GuidanceConfig) -> Result<BracketStack> {
    Ok(sample_brackets_traced(model, cfg)?.stack)
}

pub fn sample_brackets_traced(model: &dyn ScoreModel, cfg: &GuidanceConfig) -> Result<SampleRun> {
    let started = Instant::now();
    if cfg.condition.is_some() && !model.uses_condition() {
        log::warn!("{} ignores the conditioning token", model.describe());
    }
    let mut state = init_state(model, cfg)?;
    let plan = SamplingPlan::new(model, cfg.steps)?;
    let decoder = DomainDecoder(model.value_domain());
    let ctx = StepContext {
        model,
        decoder: &decoder,
        cfg,
        plan: &plan,
    };
    let mut steps = Vec::with_capacity(plan.len());
    while state.t > 0 {
        steps.push(step_state(&ctx, &mut state)?);
    }
    let stack = finish(state.x, cfg, &decoder, model.value_domain())?;
    Ok(SampleRun {
        stack,
        steps,
        seconds: started.elapsed().as_secs_f64(),
    })
}

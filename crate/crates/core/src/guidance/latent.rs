//! Sampling in a latent space: the cost is evaluated on decoded estimates
//! and its gradient is pulled back through the decoder.

use crate::consistency::{total_cost_and_grad, BracketStack, CostWeights, GuidanceTarget};
use crate::error::{Error, Result};
use crate::image::{Image, LdrImage, Shape};
use crate::radiometry::{Crf, ExposureBracket};
use crate::score::{ScoreModel, ValueDomain};

use super::{finish, init_state, step_state, GuidanceConfig, SamplerState, SamplingPlan, StepContext, StepRecord};

/// Maps latent codes to display-space images.
pub trait DecoderModel: Send + Sync {
    fn decode(&self, latent: &Image) -> Result<Image>;

    /// Vector-Jacobian product `J(latent)^T upstream`.
    fn vjp(&self, latent: &Image, upstream: &Image) -> Result<Image>;

    fn describe(&self) -> String;
}

/// Affine map from a model's value domain to `[0, 1]`; the decoder behind
/// pixel-space sampling.
pub(crate) struct DomainDecoder(pub ValueDomain);

impl DecoderModel for DomainDecoder {
    fn decode(&self, latent: &Image) -> Result<Image> {
        let d = self.0;
        Ok(latent.map(|v| d.to_unit(v)))
    }

    fn vjp(&self, _latent: &Image, upstream: &Image) -> Result<Image> {
        let s = self.0.unit_slope();
        Ok(upstream.map(|v| v * s))
    }

    fn describe(&self) -> String {
        format!("{} to [0,1]", self.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDecoder;

impl DecoderModel for IdentityDecoder {
    fn decode(&self, latent: &Image) -> Result<Image> {
        Ok(latent.clone())
    }

    fn vjp(&self, _latent: &Image, upstream: &Image) -> Result<Image> {
        Ok(upstream.clone())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// `decode(z) = A vec(z) + b`, reshaped to `output`.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    matrix: Vec<f64>,
    bias: Vec<f64>,
    input: Shape,
    output: Shape,
}

impl LinearDecoder {
    /// `matrix` is row-major with one row per output sample.
    pub fn new(matrix: Vec<f64>, bias: Vec<f64>, input: Shape, output: Shape) -> Result<Self> {
        let n_in = input.0 * input.1 * input.2;
        let n_out = output.0 * output.1 * output.2;
        if matrix.len() != n_in * n_out || bias.len() != n_out {
            return Err(Error::Config(format!(
                "linear decoder needs a {n_out}x{n_in} matrix and {n_out} biases"
            )));
        }
        if matrix.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Config("linear decoder has non-finite entries".into()));
        }
        Ok(Self {
            matrix,
            bias,
            input,
            output,
        })
    }

    fn check(&self, latent: &Image) -> Result<()> {
        if latent.shape() != self.input {
            return Err(Error::Shape {
                expected: self.input,
                actual: latent.shape(),
            });
        }
        Ok(())
    }
}

impl DecoderModel for LinearDecoder {
    fn decode(&self, latent: &Image) -> Result<Image> {
        self.check(latent)?;
        let z = latent.data();
        let data = self
            .matrix
            .chunks_exact(z.len())
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(z).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        let (h, w, c) = self.output;
        Image::from_vec(h, w, c, data)
    }

    fn vjp(&self, latent: &Image, upstream: &Image) -> Result<Image> {
        self.check(latent)?;
        if upstream.shape() != self.output {
            return Err(Error::Shape {
                expected: self.output,
                actual: upstream.shape(),
            });
        }
        let n_in = latent.len();
        let mut out = vec![0.0; n_in];
        for (row, u) in self.matrix.chunks_exact(n_in).zip(upstream.data()) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += a * u);
        }
        let (h, w, c) = self.input;
        Image::from_vec(h, w, c, out)
    }

    fn describe(&self) -> String {
        format!("linear {:?} -> {:?}", self.input, self.output)
    }
}

/// Gradient of the bracket cost at `offset` with respect to that bracket's
/// latent estimate, other brackets held fixed. Decoded values are clamped
/// to `[0, 1]` and the gradient is zero where the clamp is active.
#[allow(clippy::too_many_arguments)]
pub fn latent_guidance_gradient(
    offset: isize,
    latents: &[Image],
    evs: &[f64],
    decoder: &dyn DecoderModel,
    target: &GuidanceTarget,
    weights: &CostWeights,
    crf: &Crf,
) -> Result<(f64, Image)> {
    if latents.len() != evs.len() {
        return Err(Error::Contract("one latent per exposure value is required".into()));
    }
    let decoded: Vec<Image> = latents.iter().map(|z| decoder.decode(z)).collect::<Result<_>>()?;
    let stack = BracketStack::new(
        decoded
            .iter()
            .zip(evs)
            .map(|(d, &ev)| ExposureBracket::new(LdrImage::from_clamped(d.clone()), ev))
            .collect::<Result<_>>()?,
    )?;
    let i = (stack.ev0_index() as isize + offset) as usize;
    let (cost, g) = total_cost_and_grad(offset, &stack, target, weights, crf)?;
    let masked = g.zip_map(&decoded[i], |gv, d| if (0.0..=1.0).contains(&d) { gv } else { 0.0 })?;
    Ok((cost, decoder.vjp(&latents[i], &masked)?))
}

/// One coupled step over latent chains; the cost sees decoded estimates.
pub fn latent_dps_step(
    state: &mut SamplerState,
    latent_model: &dyn ScoreModel,
    decoder: &dyn DecoderModel,
    cfg: &GuidanceConfig,
) -> Result<StepRecord> {
    if cfg.fix_ev0 {
        return Err(Error::Capability("pinning EV+0 in latent space needs an encoder".into()));
    }
    let plan = SamplingPlan::new(latent_model, cfg.steps)?;
    let ctx = StepContext {
        model: latent_model,
        decoder,
        cfg,
        plan: &plan,
    };
    step_state(&ctx, state)
}

/// Full latent-space run from noise, returning decoded brackets.
pub fn sample_brackets_latent(latent_model: &dyn ScoreModel, decoder: &dyn DecoderModel, cfg: &GuidanceConfig) -> Result<BracketStack> {
    if cfg.fix_ev0 {
        return Err(Error::Capability("pinning EV+0 in latent space needs an encoder".into()));
    }
    // the guide lives in display space, so init_state must not compare it
    // against the latent shape
    let latent_cfg = GuidanceConfig {
        target: GuidanceTarget::None,
        ..cfg.clone()
    };
    let mut state = init_state(latent_model, &latent_cfg)?;
    let plan = SamplingPlan::new(latent_model, cfg.steps)?;
    let ctx = StepContext {
        model: latent_model,
        decoder,
        cfg,
        plan: &plan,
    };
    while state.t > 0 {
        step_state(&ctx, &mut state)?;
    }
    finish(state.x, cfg, decoder, latent_model.value_domain())
}

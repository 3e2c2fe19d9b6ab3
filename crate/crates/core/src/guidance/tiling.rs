//! Wide canvases from a fixed-resolution model: overlapping tiles are
//! stepped independently and their proposals averaged every step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{BracketStack, GuidanceTarget};
use crate::error::{Error, Result};
use crate::image::{Image, LdrImage};
use crate::score::ScoreModel;

use super::latent::DomainDecoder;
use super::{add_noise, finish, fix_ev0_projection, guide_of, model_shape, standard_normal_image, GuidanceConfig, SamplingPlan, StepContext};

/// Left edges of the tiles covering `canvas_width`.
pub fn tile_offsets(canvas_width: usize, tile: usize, overlap: usize) -> Result<Vec<usize>> {
    if tile == 0 || overlap >= tile || tile > canvas_width {
        return Err(Error::Config(format!(
            "invalid tiling: canvas {canvas_width}, tile {tile}, overlap {overlap}"
        )));
    }
    let stride = tile - overlap;
    if !(canvas_width - tile).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "canvas width {canvas_width} is not {tile} plus a multiple of {stride}"
        )));
    }
    Ok((0..=(canvas_width - tile) / stride).map(|k| k * stride).collect())
}

fn crop_target(target: &GuidanceTarget, x0: usize, w: usize) -> Result<GuidanceTarget> {
    Ok(match target {
        GuidanceTarget::Image(y) => GuidanceTarget::Image(LdrImage::from_clamped(y.crop_columns(x0, w)?)),
        other => other.clone(),
    })
}

fn add_into(dst: &mut Image, src: &Image, x0: usize) {
    let c = dst.channels();
    for y in 0..src.height() {
        let d = dst.index(y, x0, 0);
        let s = src.index(y, 0, 0);
        let n = src.width() * c;
        dst.data_mut()[d..d + n]
            .iter_mut()
            .zip(&src.data()[s..s + n])
            .for_each(|(a, b)| *a += b);
    }
}

/// Samples a bracket stack on a canvas wider than the model. Image guides
/// must match the canvas; histogram guides apply to every tile.
pub fn tiled_sample(model: &dyn ScoreModel, cfg: &GuidanceConfig, canvas_width: usize, tile: usize, overlap: usize) -> Result<BracketStack> {
    cfg.validate()?;
    let (h, w, c) = model_shape(model)?;
    if tile != w {
        return Err(Error::Config(format!("tile width {tile} must equal the model width {w}")));
    }
    let offsets = tile_offsets(canvas_width, tile, overlap)?;
    let canvas = (h, canvas_width, c);
    if let GuidanceTarget::Image(y) = &cfg.target {
        if y.shape() != canvas {
            return Err(Error::Shape {
                expected: canvas,
                actual: y.shape(),
            });
        }
    }
    if cfg.condition.is_some() && !model.uses_condition() {
        log::warn!("{} ignores the conditioning token", model.describe());
    }

    let plan = SamplingPlan::new(model, cfg.steps)?;
    let domain = model.value_domain();
    let decoder = DomainDecoder(domain);
    let ctx = StepContext {
        model,
        decoder: &decoder,
        cfg,
        plan: &plan,
    };
    let fixed = guide_of(cfg);
    let ev0 = cfg.ev0_index();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xs: Vec<Image> = cfg.evs.iter().map(|_| standard_normal_image(canvas, &mut rng)).collect();
    if let Some(y) = fixed {
        xs[ev0] = fix_ev0_projection(y, plan.schedule.alpha_bar[plan.len() - 1], &xs[ev0], domain)?;
    }
    let targets: Vec<GuidanceTarget> = offsets
        .iter()
        .map(|&x0| crop_target(&cfg.target, x0, tile))
        .collect::<Result<_>>()?;
    let guides: Vec<Option<LdrImage>> = offsets
        .iter()
        .map(|&x0| fixed.map(|y| y.crop_columns(x0, tile).map(LdrImage::from_clamped)).transpose())
        .collect::<Result<_>>()?;

    for t in (1..=plan.len()).rev() {
        let mut mean = if offsets.len() == 1 {
            ctx.step_tile(&xs, t, &targets[0], guides[0].as_ref())?.mean
        } else {
            let mut sum: Vec<Image> = xs.iter().map(|_| Image::zeros(h, canvas_width, c)).collect();
            let mut count = vec![0.0f64; canvas_width];
            for (k, &x0) in offsets.iter().enumerate() {
                let tiles: Vec<Image> = xs.iter().map(|x| x.crop_columns(x0, tile)).collect::<Result<_>>()?;
                let out = ctx.step_tile(&tiles, t, &targets[k], guides[k].as_ref())?;
                for (s, m) in sum.iter_mut().zip(&out.mean) {
                    add_into(s, m, x0);
                }
                count[x0..x0 + tile].iter_mut().for_each(|n| *n += 1.0);
            }
            for s in &mut sum {
                for y in 0..h {
                    for (x, n) in count.iter().enumerate() {
                        let i = s.index(y, x, 0);
                        s.data_mut()[i..i + c].iter_mut().for_each(|v| *v /= n);
                    }
                }
            }
            sum
        };
        if t > 1 {
            let zs: Vec<Image> = (0..mean.len()).map(|_| standard_normal_image(canvas, &mut rng)).collect();
            add_noise(&mut mean, &zs, t, &plan, fixed.map(|_| ev0));
        }
        xs = mean;
    }
    finish(xs, cfg, &decoder, domain)
}

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{ToyArch, ToyNet};
use super::{image_to_planar, ToyExample, ToyModel, TrainingInfo};
use crate::error::{Error, Result};
use crate::score::{make_schedule, NoiseSchedule, ValueDomain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Examples held out of training for the loss report.
    pub holdout: usize,
    /// Noise draws per held-out example.
    pub holdout_draws: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            seed: 0,
            batch_size: 16,
            learning_rate: 2e-3,
            hidden: 32,
            holdout: 32,
            holdout_draws: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub parameters: usize,
    pub seconds: f64,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

struct Draw {
    example: usize,
    t: usize,
    eps: Vec<f32>,
    flip_x: bool,
    flip_y: bool,
}

fn flipped(x: &[f32], c: usize, h: usize, w: usize, fx: bool, fy: bool) -> Vec<f32> {
    if !fx && !fy {
        return x.to_vec();
    }
    let mut out = vec![0f32; x.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if fy { h - 1 - y } else { y };
            for xx in 0..w {
                let sx = if fx { w - 1 - xx } else { xx };
                out[(ch * h + y) * w + xx] = x[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn noisy_input(clean: &[f32], eps: &[f32], ab: f64) -> Vec<f32> {
    let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    clean.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect()
}

fn draw(rng: &mut ChaCha8Rng, example: usize, steps: usize, len: usize, augment: bool) -> Draw {
    let t = rng.random_range(0..steps);
    let eps = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    let (flip_x, flip_y) = if augment {
        (rng.random::<bool>(), rng.random::<bool>())
    } else {
        (false, false)
    };
    Draw {
        example,
        t,
        eps,
        flip_x,
        flip_y,
    }
}

fn mean_loss(net: &ToyNet, data: &[Vec<f32>], draws: &[Draw], schedule: &NoiseSchedule) -> f64 {
    let losses: Vec<f64> = draws
        .par_iter()
        .map(|d| {
            let x = noisy_input(&data[d.example], &d.eps, schedule.alpha_bar[d.t]);
            let out = net.forward(&x, d.t, schedule.len());
            out.iter()
                .zip(&d.eps)
                .map(|(o, e)| ((o - e) as f64).powi(2))
                .sum::<f64>()
                / out.len() as f64
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

/// Trains the toy noise predictor on the LDR renderings of `dataset` with
/// default options apart from `epochs` and `seed`.
pub fn train_toy_denoiser(dataset: &[ToyExample], schedule: &NoiseSchedule, epochs: usize, seed: u64) -> Result<ToyModel> {
    let opts = TrainOptions {
        epochs,
        seed,
        ..Default::default()
    };
    Ok(train_toy_denoiser_with(dataset, schedule, &opts)?.0)
}

pub fn train_toy_denoiser_with(
    dataset: &[ToyExample],
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
) -> Result<(ToyModel, TrainReport)> {
    let started = Instant::now();
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config("cannot train on an empty dataset".into()))?;
    let (h, w, c) = first.ldr.image.shape();
    if h != w {
        return Err(Error::Config(format!("toy model needs square images, got {h}x{w}")));
    }
    if let Some(bad) = dataset.iter().find(|e| e.ldr.image.shape() != (h, w, c)) {
        return Err(Error::Shape {
            expected: (h, w, c),
            actual: bad.ldr.image.shape(),
        });
    }
    if opts.batch_size == 0 || opts.learning_rate.is_nan() || opts.learning_rate <= 0.0 {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    if *schedule != make_schedule(schedule.len(), schedule.kind)? {
        return Err(Error::Config(
            "toy models are trained on an unmodified linear or cosine schedule".into(),
        ));
    }

    let domain = ValueDomain::SignedUnit;
    let data: Vec<Vec<f32>> = dataset
        .iter()
        .map(|e| image_to_planar(&e.ldr.image.map(|v| domain.from_unit(v))))
        .collect();
    let holdout = if data.len() >= 2 {
        opts.holdout.min(data.len() / 2)
    } else {
        0
    };
    let n_train = data.len() - holdout;
    let heldout_ids: Vec<usize> = if holdout == 0 {
        (0..data.len()).collect()
    } else {
        (n_train..data.len()).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let arch = ToyArch {
        hidden: opts.hidden,
        ..ToyArch::new(h, c)
    };
    let mut net = ToyNet::init(arch, &mut rng);
    let len = h * w * c;
    let steps = schedule.len();

    let mut eval_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5e_ed0f_4e1d);
    let eval_draws: Vec<Draw> = heldout_ids
        .iter()
        .flat_map(|&i| std::iter::repeat_n(i, opts.holdout_draws.max(1)))
        .map(|i| draw(&mut eval_rng, i, steps, len, false))
        .collect();
    let initial = mean_loss(&net, &data, &eval_draws, schedule);

    let per_epoch = n_train.div_ceil(opts.batch_size).max(1);
    let total_steps = per_epoch * opts.epochs;
    let mut adam = Adam::new(net.params.len());
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        let mut acc = 0.0;
        for _ in 0..per_epoch {
            let batch: Vec<Draw> = (0..opts.batch_size)
                .map(|_| {
                    let i = rng.random_range(0..n_train);
                    draw(&mut rng, i, steps, len, true)
                })
                .collect();
            let results: Vec<(f32, Vec<f32>)> = batch
                .par_iter()
                .map(|d| {
                    let clean = flipped(&data[d.example], c, h, w, d.flip_x, d.flip_y);
                    let x = noisy_input(&clean, &d.eps, schedule.alpha_bar[d.t]);
                    net.loss_and_grad(&x, d.t, steps, &d.eps)
                })
                .collect();
            let mut grad = vec![0f32; net.params.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += *l as f64;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / results.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            let norm = grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 1.0 {
                let s = (1.0 / norm) as f32;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            let progress = step as f64 / total_steps.max(1) as f64;
            let lr = opts.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.update(&mut net.params, &grad, lr as f32);
            acc += loss / results.len() as f64;
            step += 1;
        }
        let mean = acc / per_epoch as f64;
        log::debug!("toy epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let final_loss = mean_loss(&net, &data, &eval_draws, schedule);

    let info = TrainingInfo {
        seed: opts.seed,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        learning_rate: opts.learning_rate,
        dataset_size: dataset.len(),
        heldout_size: heldout_ids.len(),
        initial_heldout_loss: initial,
        final_heldout_loss: final_loss,
    };
    let report = TrainReport {
        initial_heldout_loss: initial,
        final_heldout_loss: final_loss,
        epoch_losses,
        steps: step,
        parameters: net.params.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    let model = ToyModel::from_parts(net, schedule.clone(), Some(info))?;
    Ok((model, report))
}

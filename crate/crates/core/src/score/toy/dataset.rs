use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{HdrImage, Image, LdrImage};
use crate::radiometry::{Crf, ExposureBracket};

/// Procedural HDR scene family: a tinted gradient background with a few
/// bright soft blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneSpec {
    pub size: usize,
    pub channels: usize,
    /// Inclusive range of blob counts.
    pub n_blobs: (usize, usize),
    /// Range of blob peak radiance, relative to a background near 0.05..0.4.
    pub blob_peak_radiance: (f64, f64),
    /// Range of the background base radiance (sampled log-uniformly).
    pub background_level: (f64, f64),
    /// Relative change of the background across the frame.
    pub background_gradient: f64,
    /// Standard deviation of additive linear noise before quantisation.
    pub noise_sigma_dark: f64,
    /// Inclusive range of integer EVs for the LDR renderings.
    pub ev_range: (i32, i32),
    /// Smallest max/min-nonzero ratio of every generated scene.
    pub min_dynamic_range: f64,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 3,
            n_blobs: (1, 4),
            blob_peak_radiance: (2.0, 32.0),
            background_level: (0.05, 0.4),
            background_gradient: 0.8,
            noise_sigma_dark: 0.0,
            ev_range: (-4, 4),
            min_dynamic_range: 32.0,
        }
    }
}

impl ToySceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("toy scene spec: {m}")));
        if self.size < 8 {
            return bad("size must be at least 8");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.n_blobs.0 < 1 || self.n_blobs.0 > self.n_blobs.1 {
            return bad("blob count range must be non-empty and start at 1 or more");
        }
        let (lo, hi) = self.blob_peak_radiance;
        if !(lo > 1.0 && hi >= lo && hi.is_finite()) {
            return bad("blob peaks must exceed 1");
        }
        let (blo, bhi) = self.background_level;
        if !(blo > 0.0 && bhi >= blo && bhi.is_finite()) {
            return bad("background range must be positive");
        }
        if !(0.0..1.0).contains(&self.background_gradient) {
            return bad("background gradient must lie in [0, 1)");
        }
        if !(self.noise_sigma_dark >= 0.0 && self.noise_sigma_dark.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        if self.ev_range.0 > self.ev_range.1 {
            return bad("empty EV range");
        }
        if !(self.min_dynamic_range >= 1.0 && self.min_dynamic_range.is_finite()) {
            return bad("minimum dynamic range must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyExample {
    pub hdr: HdrImage,
    /// Gamma-encoded rendering of `hdr` at `ldr.ev`.
    pub ldr: ExposureBracket,
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    peak: f64,
    tint: Vec<f64>,
    square: bool,
}

fn scene(spec: &ToySceneSpec, rng: &mut ChaCha8Rng) -> HdrImage {
    let n = spec.size;
    let c = spec.channels;
    let (blo, bhi) = spec.background_level;
    let base = (blo.ln() + rng.random::<f64>() * (bhi.ln() - blo.ln())).exp();
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (dy, dx) = (angle.sin(), angle.cos());
    let bg_tint: Vec<f64> = (0..c).map(|_| 0.7 + 0.3 * rng.random::<f64>()).collect();

    let count = rng.random_range(spec.n_blobs.0..=spec.n_blobs.1);
    let (plo, phi) = spec.blob_peak_radiance;
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            cy: rng.random::<f64>() * n as f64,
            cx: rng.random::<f64>() * n as f64,
            radius: 1.5 + rng.random::<f64>() * n as f64 / 6.0,
            peak: (plo.ln() + rng.random::<f64>() * (phi.ln() - plo.ln())).exp(),
            tint: (0..c).map(|_| 0.6 + 0.4 * rng.random::<f64>()).collect(),
            square: rng.random::<f64>() < 0.25,
        })
        .collect();

    let half = (n as f64 - 1.0) / 2.0;
    let background = Image::from_fn(n, n, c, |y, x, ch| {
        let u = ((y as f64 - half) * dy + (x as f64 - half) * dx) / n as f64;
        base * bg_tint[ch] * (1.0 + spec.background_gradient * u)
    });
    let highlights = Image::from_fn(n, n, c, |y, x, ch| {
        blobs
            .iter()
            .map(|b| {
                let (py, px) = (y as f64 + 0.5 - b.cy, x as f64 + 0.5 - b.cx);
                let d2 = if b.square {
                    let m = py.abs().max(px.abs());
                    if m <= b.radius { 0.0 } else { (m - b.radius).powi(2) * 4.0 }
                } else {
                    (py * py + px * px) / (b.radius * b.radius)
                };
                b.peak * b.tint[ch] * (-0.5 * d2).exp()
            })
            .sum()
    });

    // strengthen the highlights until the scene is genuinely high dynamic range
    let mut gain = 1.0;
    loop {
        let img = background
            .zip_map(&highlights, |b, h| b + gain * h)
            .expect("same shape");
        let hdr = HdrImage::new(img).expect("positive finite radiance");
        if hdr.dynamic_range() >= spec.min_dynamic_range || gain > 1e6 {
            return hdr;
        }
        gain *= 2.0;
    }
}

/// Renders `hdr` at `ev`: exposure scaling, optional linear noise, clipping,
/// gamma encoding.
fn render(hdr: &HdrImage, ev: i32, sigma: f64, crf: &Crf, rng: &mut ChaCha8Rng) -> LdrImage {
    let scale = (ev as f64).exp2();
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("valid sigma"));
    let mut img = hdr.image().map(|v| v * scale);
    if let Some(noise) = noise {
        for v in img.data_mut() {
            *v += noise.sample(rng);
        }
    }
    img.map_inplace(|v| crf.apply_scalar(v.clamp(0.0, 1.0)));
    LdrImage::from_clamped(img)
}

/// Deterministic synthetic dataset of HDR scenes and single LDR renderings
/// at EVs drawn uniformly from `spec.ev_range`.
pub fn generate_toy_dataset(spec: &ToySceneSpec, count: usize, seed: u64) -> Result<Vec<ToyExample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let crf = Crf::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let hdr = scene(spec, &mut rng);
            let ev = rng.random_range(spec.ev_range.0..=spec.ev_range.1);
            let ldr = render(&hdr, ev, spec.noise_sigma_dark, &crf, &mut rng);
            Ok(ToyExample {
                hdr,
                ldr: ExposureBracket::new(ldr, ev as f64)?,
            })
        })
        .collect()
}

//! Evaluation helpers: exposure normalisation, bracket synthesis from
//! radiance, the bracket consistency score, and fixed-location crops.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::BracketStack;
use crate::error::{Error, Result};
use crate::image::{HdrImage, LdrImage};
use crate::merge::io::write_png;
use crate::radiometry::{ev_ratio, Crf, ExposureBracket};

pub const PSNR_CAP_DB: f64 = 99.0;
/// Downward re-exposure ignores pixels whose reference is at least this bright.
pub const SATURATION_MASK: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoExposure {
    pub percentile: f64,
    pub level: f64,
}

impl Default for AutoExposure {
    fn default() -> Self {
        Self {
            percentile: 0.90,
            level: 0.90,
        }
    }
}

/// Nearest-rank percentile, `q` in `[0, 1]`.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// EV shift that puts the chosen percentile of the rendered image at `level`.
///
/// The CRF is monotone, so the percentile of the rendering is the rendering
/// of the radiance percentile and the shift has a closed form.
pub fn auto_ev0_with(hdr: &HdrImage, crf: &Crf, rule: &AutoExposure) -> Result<f64> {
    if !(rule.percentile > 0.0 && rule.percentile <= 1.0 && rule.level > 0.0 && rule.level < 1.0) {
        return Err(Error::Config(format!(
            "auto exposure needs percentile in (0, 1] and level in (0, 1), got {} and {}",
            rule.percentile, rule.level
        )));
    }
    if hdr.is_empty() || hdr.max() <= 0.0 {
        return Err(Error::Contract("cannot auto-expose an all-zero image".into()));
    }
    let p = percentile(hdr.data(), rule.percentile);
    if p <= 0.0 {
        return Err(Error::Contract(format!(
            "the {}th percentile of the radiance is zero; nothing to expose",
            rule.percentile * 100.0
        )));
    }
    Ok((crf.invert_scalar(rule.level) / p).log2())
}

pub fn auto_ev0(hdr: &HdrImage, crf: &Crf) -> Result<f64> {
    auto_ev0_with(hdr, crf, &AutoExposure::default())
}

/// Renders `CRF(min(2^ev * radiance, 1))` for each EV.
pub fn extract_brackets(hdr: &HdrImage, evs: &[f64], crf: &Crf) -> Result<BracketStack> {
    let brackets = evs
        .iter()
        .map(|&ev| {
            let s = ev.exp2();
            let img = hdr.image().map(|r| crf.apply_scalar((r * s).clamp(0.0, 1.0)));
            ExposureBracket::new(LdrImage::new(img)?, ev)
        })
        .collect::<Result<Vec<_>>>()?;
    BracketStack::new(brackets)
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &LdrImage, b: &LdrImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.len().max(1) as f64;
    let sse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(sse / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConsistency {
    pub ev_low: f64,
    pub ev_high: f64,
    /// Lower bracket brightened onto the higher one.
    pub up_db: f64,
    /// Higher bracket darkened onto the lower one, saturated reference masked.
    pub down_db: f64,
    pub db: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// PSNR over the pooled residuals of every pair and both directions.
    pub overall_db: f64,
    pub pairs: Vec<PairConsistency>,
}

fn directed_sse(reference: &ExposureBracket, target: &ExposureBracket, crf: &Crf, mask: bool) -> (f64, usize) {
    let ratio = ev_ratio(target.ev, reference.ev);
    let mut sse = 0.0;
    let mut n = 0;
    for (&r, &t) in reference.image.data().iter().zip(target.image.data()) {
        if mask && r >= SATURATION_MASK {
            continue;
        }
        let d = crf.re_expose_scalar(r, ratio) - t;
        sse += d * d;
        n += 1;
    }
    (sse, n)
}

fn mse(sse: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sse / n as f64
    }
}

pub fn bracket_consistency_report(stack: &BracketStack, crf: &Crf) -> Result<ConsistencyReport> {
    let b = stack.brackets();
    if b.len() < 2 {
        return Err(Error::Contract("consistency needs at least two brackets".into()));
    }
    let (mut total_sse, mut total_n) = (0.0, 0);
    let mut pairs = Vec::with_capacity(b.len() - 1);
    for w in b.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        let (su, nu) = directed_sse(lo, hi, crf, false);
        let (sd, nd) = directed_sse(hi, lo, crf, true);
        total_sse += su + sd;
        total_n += nu + nd;
        pairs.push(PairConsistency {
            ev_low: lo.ev,
            ev_high: hi.ev,
            up_db: psnr_from_mse(mse(su, nu)),
            down_db: psnr_from_mse(mse(sd, nd)),
            db: psnr_from_mse(mse(su + sd, nu + nd)),
            samples: nu + nd,
        });
    }
    Ok(ConsistencyReport {
        overall_db: psnr_from_mse(mse(total_sse, total_n)),
        pairs,
    })
}

pub fn bracket_consistency_psnr(stack: &BracketStack, crf: &Crf) -> Result<f64> {
    Ok(bracket_consistency_report(stack, crf)?.overall_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            count: 100,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropManifest {
    pub seed: u64,
    pub size: usize,
    /// Top-left corners as `[x, y]`.
    pub coords: Vec<[usize; 2]>,
}

/// Crop corners for an image of the given size; a pure function of its inputs.
pub fn crop_coordinates(height: usize, width: usize, spec: &CropSpec) -> Result<CropManifest> {
    if spec.count == 0 {
        return Err(Error::Config("crop count must be at least 1".into()));
    }
    if spec.size == 0 || spec.size > height || spec.size > width {
        return Err(Error::Config(format!(
            "crop size {} does not fit a {height}x{width} image",
            spec.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coords = (0..spec.count)
        .map(|_| [rng.random_range(0..=width - spec.size), rng.random_range(0..=height - spec.size)])
        .collect();
    Ok(CropManifest {
        seed: spec.seed,
        size: spec.size,
        coords,
    })
}

/// Cuts the same crops out of every image.
pub fn extract_crops(images: &[LdrImage], spec: &CropSpec) -> Result<(Vec<Vec<LdrImage>>, CropManifest)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("no images to crop".into()))?;
    for img in images {
        first.ensure_same_shape(img)?;
    }
    let manifest = crop_coordinates(first.height(), first.width(), spec)?;
    let crops = images
        .iter()
        .map(|img| {
            manifest
                .coords
                .iter()
                .map(|&[x, y]| LdrImage::new(img.crop(y, x, spec.size, spec.size)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((crops, manifest))
}

/// `ev+2`, `ev-4`, `ev+0`.
pub fn ev_label(ev: f64) -> String {
    let sign = if ev < 0.0 { '-' } else { '+' };
    format!("ev{sign}{}", ev.abs())
}

/// Writes `patches/ev±N/crop_NNN.png` for every bracket and
/// `patches/manifest.json`. Returns the manifest path.
pub fn export_crops(out_dir: &Path, stack: &BracketStack, spec: &CropSpec) -> Result<PathBuf> {
    let images: Vec<LdrImage> = stack.brackets().iter().map(|b| b.image.clone()).collect();
    let (crops, manifest) = extract_crops(&images, spec)?;
    let root = out_dir.join("patches");
    for (b, set) in stack.brackets().iter().zip(&crops) {
        let dir = root.join(ev_label(b.ev));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, crop) in set.iter().enumerate() {
            write_png(&dir.join(format!("crop_{i:03}.png")), crop)?;
        }
    }
    let path = root.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::merge::{merge_stack, weight, MergeWeightSpec};

    fn scene(h: usize, w: usize) -> HdrImage {
        HdrImage::new(Image::from_fn(h, w, 3, |y, x, c| {
            let d = ((y as f64 - 5.0).powi(2) + (x as f64 - 9.0).powi(2)).sqrt();
            0.08 + 0.05 * c as f64 + 12.0 * (-d * d / 8.0).exp()
        }))
        .unwrap()
    }

    #[test]
    fn auto_ev0_examples() {
        let crf = Crf::default();
        // a rendering whose 90th percentile already sits at 0.9
        let ldr = Image::from_fn(1, 10, 1, |_, x, _| (x as f64 + 1.0) * 0.1);
        let hdr = HdrImage::new(ldr.map(|v| crf.invert_scalar(v.min(1.0)))).unwrap();
        let s = auto_ev0(&hdr, &crf).unwrap();
        assert!(s.abs() < 1e-9, "{s}");
        let s4 = auto_ev0(&hdr.scaled(4.0).unwrap(), &crf).unwrap();
        assert!((s4 - (s - 2.0)).abs() < 1e-9);
        let blob = scene(16, 20);
        let s = auto_ev0(&blob, &crf).unwrap();
        assert!(s.is_finite() && s.abs() <= 12.0);
        let shifted = blob.image().map(|r| crf.apply_scalar((r * s.exp2()).min(1.0)));
        let p = percentile(shifted.data(), 0.9);
        assert!((p - 0.9).abs() < 0.01);
        assert!(auto_ev0(&HdrImage::new(Image::zeros(2, 2, 1)).unwrap(), &crf).is_err());
    }

    #[test]
    fn brackets_are_monotone_and_invert_merge() {
        let crf = Crf::default();
        let hdr = scene(12, 18);
        let stack = extract_brackets(&hdr, &[-4.0, -2.0, 0.0, 2.0, 4.0], &crf).unwrap();
        assert_eq!(stack.len(), 5);
        for w in stack.brackets().windows(2) {
            assert!(w[0].image.data().iter().zip(w[1].image.data()).all(|(a, b)| a <= b));
        }
        let spec = MergeWeightSpec::default();
        let merged = merge_stack(&stack, &crf, &spec).unwrap();
        for i in 0..hdr.len() {
            if stack.brackets().iter().any(|b| weight(b.image.data()[i], &spec) > 0.0) {
                assert!((merged.data()[i] / hdr.data()[i] - 1.0).abs() < 1e-6);
            }
        }
        let again = extract_brackets(&merged, &stack.evs(), &crf).unwrap();
        for (a, b) in again.brackets().iter().zip(stack.brackets()) {
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                if weight(*y, &spec) > 0.0 {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn psnr_examples() {
        let a = LdrImage::filled(4, 4, 1, 0.5).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = LdrImage::filled(4, 4, 1, 0.51).unwrap();
        assert!((psnr(&a, &b).unwrap() - 40.0).abs() < 1e-9);
        let z = LdrImage::filled(4, 4, 1, 0.0).unwrap();
        let o = LdrImage::filled(4, 4, 1, 1.0).unwrap();
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&a, &LdrImage::filled(4, 5, 1, 0.5).unwrap()).is_err());
    }

    #[test]
    fn perfect_stack_hits_the_cap() {
        let crf = Crf::default();
        let stack = extract_brackets(&scene(10, 20), &[-4.0, -2.0, 0.0, 2.0, 4.0], &crf).unwrap();
        let r = bracket_consistency_report(&stack, &crf).unwrap();
        assert_eq!(r.overall_db, 99.0);
        assert_eq!(r.pairs.len(), 4);
        let single = extract_brackets(&scene(4, 4), &[0.0], &crf).unwrap();
        assert!(bracket_consistency_psnr(&single, &crf).is_err());
    }

    #[test]
    fn crops_share_coordinates() {
        let spec = CropSpec {
            count: 100,
            size: 64,
            seed: 3,
        };
        let m = crop_coordinates(256, 256, &spec).unwrap();
        assert_eq!(m.coords.len(), 100);
        assert!(m.coords.iter().all(|&[x, y]| x <= 192 && y <= 192));
        assert_eq!(m, crop_coordinates(256, 256, &spec).unwrap());
        let a = LdrImage::filled(70, 80, 3, 0.2).unwrap();
        let b = LdrImage::filled(70, 80, 3, 0.7).unwrap();
        let (crops, m) = extract_crops(&[a, b], &spec).unwrap();
        assert_eq!(crops.len(), 2);
        assert!(crops.iter().all(|c| c.len() == 100 && c[0].shape() == (64, 64, 3)));
        assert!(m.coords.iter().all(|&[x, y]| x <= 16 && y <= 6));
        assert!(crop_coordinates(32, 32, &spec).is_err());
        assert!(crop_coordinates(128, 128, &CropSpec { count: 0, ..spec }).is_err());
    }

    #[test]
    fn crop_export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let crf = Crf::default();
        let stack = extract_brackets(&scene(12, 12), &[-2.0, 0.0, 2.0], &crf).unwrap();
        let spec = CropSpec {
            count: 3,
            size: 8,
            seed: 1,
        };
        let manifest = export_crops(dir.path(), &stack, &spec).unwrap();
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(json["size"], 8);
        assert_eq!(json["coords"].as_array().unwrap().len(), 3);
        for label in ["ev-2", "ev+0", "ev+2"] {
            assert!(dir.path().join("patches").join(label).join("crop_002.png").exists());
        }
    }
}

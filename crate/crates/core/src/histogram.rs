//! Differentiable per-channel histograms.
//!
//! The soft histogram assigns each sample to bins through a box-shaped bin
//! indicator smoothed by a triangular kernel of half-width `bandwidth`. The
//! outermost bins extend to infinity, so every sample contributes exactly one
//! unit of mass regardless of bandwidth, and the assignment is continuously
//! differentiable in the sample value. As the bandwidth shrinks the result
//! converges to the ordinary counting histogram.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramVec {
    pub bins: usize,
    /// One row of `bins` masses per channel.
    pub channels: Vec<Vec<f64>>,
    #[serde(default = "default_true", skip_serializing)]
    pub normalized: bool,
}

fn default_true() -> bool {
    true
}

impl HistogramVec {
    pub fn new(channels: Vec<Vec<f64>>) -> Result<Self> {
        let bins = channels.first().map_or(0, Vec::len);
        let h = Self {
            bins,
            channels,
            normalized: true,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("histogram needs >= 2 bins, got {}", self.bins)));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("histogram has no channels".into()));
        }
        for (c, row) in self.channels.iter().enumerate() {
            if row.len() != self.bins {
                return Err(Error::Config(format!(
                    "channel {c} has {} bins, expected {}",
                    row.len(),
                    self.bins
                )));
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config(format!("channel {c} has a negative or non-finite mass")));
            }
            if self.normalized {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!("channel {c} sums to {sum}, expected 1")));
                }
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut h: HistogramVec = serde_json::from_str(text)?;
        h.normalized = true;
        h.validate()?;
        Ok(h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("histogram serialises")
    }

    /// Flattened `channel-major` masses.
    pub fn flat(&self) -> Vec<f64> {
        self.channels.iter().flatten().copied().collect()
    }

    /// Largest absolute per-bin difference.
    pub fn max_abs_diff(&self, other: &HistogramVec) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftHistogramSpec {
    pub bins: usize,
    /// Half-width of the triangular smoothing kernel, in value units.
    pub bandwidth: f64,
}

impl Default for SoftHistogramSpec {
    fn default() -> Self {
        Self::with_bins(DEFAULT_BINS)
    }
}

impl SoftHistogramSpec {
    /// Default bandwidth of half a bin width.
    pub fn with_bins(bins: usize) -> Self {
        Self {
            bins,
            bandwidth: 0.5 / bins.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("soft histogram needs >= 2 bins, got {}", self.bins)));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::Config(format!("bandwidth must be > 0, got {}", self.bandwidth)));
        }
        Ok(())
    }

    fn edges(&self, bin: usize) -> (f64, f64) {
        let w = 1.0 / self.bins as f64;
        let lo = if bin == 0 { f64::NEG_INFINITY } else { bin as f64 * w };
        let hi = if bin + 1 == self.bins {
            f64::INFINITY
        } else {
            (bin + 1) as f64 * w
        };
        (lo, hi)
    }

    /// Soft membership of `v` in `bin` and its derivative with respect to `v`.
    #[inline]
    fn membership(&self, v: f64, bin: usize) -> (f64, f64) {
        let (lo, hi) = self.edges(bin);
        let h = self.bandwidth;
        let (a, da) = tri_cdf((v - lo) / h);
        let (b, db) = tri_cdf((v - hi) / h);
        (a - b, (da - db) / h)
    }
}

/// CDF of the unit triangular density on `[-1, 1]` and the density itself.
#[inline]
fn tri_cdf(z: f64) -> (f64, f64) {
    if z <= -1.0 {
        (0.0, 0.0)
    } else if z <= 0.0 {
        (0.5 * (1.0 + z) * (1.0 + z), 1.0 + z)
    } else if z < 1.0 {
        (1.0 - 0.5 * (1.0 - z) * (1.0 - z), 1.0 - z)
    } else {
        (1.0, 0.0)
    }
}

pub fn soft_histogram(image: &Image, spec: &SoftHistogramSpec) -> Result<HistogramVec> {
    spec.validate()?;
    let c = image.channels();
    let pixels = (image.height() * image.width()).max(1) as f64;
    let mut channels = vec![vec![0.0; spec.bins]; c];
    for px in image.data().chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            for (b, slot) in channels[ch].iter_mut().enumerate() {
                *slot += spec.membership(v, b).0;
            }
        }
    }
    for row in &mut channels {
        row.iter_mut().for_each(|m| *m /= pixels);
    }
    Ok(HistogramVec {
        bins: spec.bins,
        channels,
        normalized: true,
    })
}

/// Vector-Jacobian product of [`soft_histogram`]: given `d loss / d hist`
/// (channel-major, `channels * bins` entries) returns `d loss / d image`.
pub fn soft_histogram_vjp(image: &Image, spec: &SoftHistogramSpec, upstream: &[f64]) -> Image {
    let c = image.channels();
    let pixels = (image.height() * image.width()).max(1) as f64;
    let mut grad = image.map(|_| 0.0);
    for (px, gpx) in image
        .data()
        .chunks_exact(c)
        .zip(grad.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let v = px[ch];
            let mut acc = 0.0;
            for b in 0..spec.bins {
                let d = spec.membership(v, b).1;
                if d != 0.0 {
                    acc += upstream[ch * spec.bins + b] * d;
                }
            }
            gpx[ch] = acc / pixels;
        }
    }
    grad
}

/// Ordinary counting histogram, normalized per channel.
pub fn hard_histogram(image: &Image, bins: usize) -> Result<HistogramVec> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs >= 2 bins, got {bins}")));
    }
    let c = image.channels();
    let pixels = (image.height() * image.width()).max(1) as f64;
    let mut channels = vec![vec![0.0; bins]; c];
    for px in image.data().chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            channels[ch][b] += 1.0;
        }
    }
    for row in &mut channels {
        row.iter_mut().for_each(|m| *m /= pixels);
    }
    Ok(HistogramVec {
        bins,
        channels,
        normalized: true,
    })
}

/// Target with `frac_saturated` of the mass in the top bin and the rest
/// spread evenly over the remaining bins.
pub fn saturation_target_histogram(
    frac_saturated: f64,
    bins: usize,
    channels: usize,
) -> Result<HistogramVec> {
    if !(0.0..=1.0).contains(&frac_saturated) {
        return Err(Error::Config(format!(
            "saturated fraction {frac_saturated} outside [0, 1]"
        )));
    }
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs >= 2 bins, got {bins}")));
    }
    let rest = (1.0 - frac_saturated) / (bins - 1) as f64;
    let mut row = vec![rest; bins];
    row[bins - 1] = frac_saturated;
    HistogramVec::new(vec![row; channels])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp(n: usize) -> Image {
        Image::from_fn(1, n, 1, |_, x, _| (x as f64 + 0.5) / n as f64)
    }

    #[test]
    fn constant_at_bin_center_concentrates() {
        let img = Image::filled(4, 4, 3, 0.35);
        let spec = SoftHistogramSpec {
            bins: 10,
            bandwidth: 1e-3,
        };
        let h = soft_histogram(&img, &spec).unwrap();
        for row in &h.channels {
            assert!(row[3] >= 0.99);
        }
    }

    #[test]
    fn soft_masses_sum_to_one() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 17 + c * 7) % 101) as f64 / 100.0);
        let h = soft_histogram(&img, &SoftHistogramSpec::default()).unwrap();
        for row in &h.channels {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ramp_matches_hard_histogram() {
        let img = ramp(1000);
        let soft = soft_histogram(&img, &SoftHistogramSpec::default()).unwrap();
        let hard = hard_histogram(&img, 10).unwrap();
        assert!(soft.max_abs_diff(&hard) < 0.02);
    }

    #[test]
    fn deviation_shrinks_with_bandwidth() {
        // off-grid ramp so hard bins are uneven and smoothing matters
        let img = Image::from_fn(1, 37, 1, |_, x, _| (x as f64 / 36.0).powi(2));
        let hard = hard_histogram(&img, 10).unwrap();
        let mut prev = f64::INFINITY;
        for bw in [0.05, 0.02, 0.01, 0.005, 0.001, 1e-5] {
            let soft = soft_histogram(&img, &SoftHistogramSpec { bins: 10, bandwidth: bw }).unwrap();
            let d = soft.max_abs_diff(&hard);
            assert!(d <= prev + 1e-12, "deviation grew at bandwidth {bw}: {d} > {prev}");
            prev = d;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn hard_histogram_examples() {
        let zeros = Image::zeros(2, 2, 3);
        let h = hard_histogram(&zeros, 10).unwrap();
        assert_eq!(h.channels[0][0], 1.0);
        assert_eq!(h.channels[2].iter().sum::<f64>(), 1.0);

        let ones = Image::filled(2, 2, 3, 1.0);
        assert_eq!(hard_histogram(&ones, 10).unwrap().channels[1][9], 1.0);

        let half = Image::from_fn(2, 2, 1, |y, _, _| y as f64);
        let h = hard_histogram(&half, 10).unwrap();
        assert_eq!(h.channels[0][0], 0.5);
        assert_eq!(h.channels[0][9], 0.5);
        assert_eq!(h.channels[0][1..9].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn saturation_targets() {
        let full = saturation_target_histogram(1.0, 10, 3).unwrap();
        assert_eq!(full.channels[0][9], 1.0);
        let none = saturation_target_histogram(0.0, 10, 3).unwrap();
        assert_eq!(none.channels[0][9], 0.0);
        assert_abs_diff_eq!(none.channels[0][0], 1.0 / 9.0, epsilon = 1e-15);
        let quarter = saturation_target_histogram(0.25, 10, 3).unwrap();
        assert_eq!(quarter.channels[2][9], 0.25);
        assert_abs_diff_eq!(quarter.channels[2][4], 0.75 / 9.0, epsilon = 1e-15);
        assert!(saturation_target_histogram(1.5, 10, 3).is_err());
    }

    #[test]
    fn json_form() {
        let h = saturation_target_histogram(0.5, 4, 3).unwrap();
        let text = h.to_json();
        assert!(text.starts_with("{\"bins\":4,\"channels\":[["));
        assert_eq!(HistogramVec::from_json(&text).unwrap(), h);
        assert!(HistogramVec::from_json("{\"bins\":4,\"channels\":[[0.5,0.5]]}").is_err());
        assert!(HistogramVec::from_json("{\"bins\":2,\"channels\":[[0.9,0.5]]}").is_err());
    }

    #[test]
    fn permutation_invariant() {
        let img = Image::from_fn(3, 5, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
        let mut data = img.data().chunks(3).map(|p| p.to_vec()).collect::<Vec<_>>();
        data.reverse();
        data.swap(2, 9);
        let shuffled = Image::from_vec(3, 5, 3, data.concat()).unwrap();
        let spec = SoftHistogramSpec::default();
        let a = soft_histogram(&img, &spec).unwrap();
        let b = soft_histogram(&shuffled, &spec).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

//! Dense image buffers.
//!
//! [`Image`] is an unconstrained `H x W x C` array of `f64` stored row-major
//! with interleaved channels. [`LdrImage`] and [`HdrImage`] wrap it and
//! enforce the value ranges of gamma-encoded display values and linear
//! radiance respectively.

use std::ops::Deref;

use crate::error::{Error, Result};

pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "buffer of length {} cannot hold a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Copies the columns `[x0, x0 + width)` into a new image.
    pub fn crop_columns(&self, x0: usize, width: usize) -> Result<Self> {
        self.crop(0, x0, self.height, width)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::Contract(format!(
                "crop {height}x{width} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in y0..y0 + height {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Bilinear resampling with pixel centres at half-integer positions.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || self.is_empty() {
            return Err(Error::Contract(format!(
                "cannot resize {}x{} to {height}x{width}",
                self.height, self.width
            )));
        }
        let src = |dst: usize, n_dst: usize, n_src: usize| {
            let p = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
            let i = p.floor() as usize;
            (i, (i + 1).min(n_src - 1), p - i as f64)
        };
        Ok(Self::from_fn(height, width, self.channels, |y, x, c| {
            let (y0, y1, fy) = src(y, height, self.height);
            let (x0, x1, fx) = src(x, width, self.width);
            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
            let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
            top * (1.0 - fy) + bot * fy
        }))
    }
}

/// Gamma-encoded display image with every sample in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage(Image);

impl LdrImage {
    pub fn new(image: Image) -> Result<Self> {
        if let Some(v) = image.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("LDR sample {v} outside [0, 1]")));
        }
        Ok(Self(image))
    }

    /// Clamps every sample into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(mut image: Image) -> Self {
        image.map_inplace(clamp_unit);
        Self(image)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Image::filled(height, width, channels, value))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }
}

impl Deref for LdrImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

/// Linear relative radiance, non-negative and finite, defined up to scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage(Image);

impl HdrImage {
    pub fn new(image: Image) -> Result<Self> {
        if let Some(v) = image.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("radiance sample {v} is not finite and >= 0")));
        }
        Ok(Self(image))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.0.map(|v| v * s))
    }

    /// Ratio of the brightest sample to the dimmest non-zero sample.
    pub fn dynamic_range(&self) -> f64 {
        let max = self.0.max();
        let min_nz = self
            .0
            .data
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min);
        if !min_nz.is_finite() || max <= 0.0 {
            return 1.0;
        }
        max / min_nz
    }
}

impl Deref for HdrImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(3, 4, 2, |y, x, c| (y * 8 + x * 2 + c) as f64);
        assert_eq!(img.resize_bilinear(3, 4).unwrap(), img);
        let flat = Image::filled(5, 7, 1, 0.3).resize_bilinear(2, 9).unwrap();
        assert!(flat.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let up = Image::from_vec(1, 2, 1, vec![0.0, 1.0]).unwrap().resize_bilinear(1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn ldr_rejects_out_of_range() {
        assert!(LdrImage::filled(2, 2, 3, 1.2).is_err());
        assert!(LdrImage::filled(2, 2, 3, -0.1).is_err());
        assert!(LdrImage::filled(2, 2, 3, 1.0).is_ok());
    }

    #[test]
    fn hdr_rejects_negative_and_nan() {
        assert!(HdrImage::new(Image::filled(1, 1, 1, -1.0)).is_err());
        assert!(HdrImage::new(Image::filled(1, 1, 1, f64::NAN)).is_err());
        assert!(HdrImage::new(Image::filled(1, 1, 1, 3.0)).is_ok());
    }

    #[test]
    fn crop_copies_the_window() {
        let img = Image::from_fn(3, 4, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let crop = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(crop.shape(), (2, 2, 2));
        assert_eq!(crop.get(0, 0, 0), 120.0);
        assert_eq!(crop.get(1, 1, 1), 231.0);
        assert!(img.crop(2, 0, 2, 1).is_err());
    }

    #[test]
    fn dynamic_range_ignores_zeros() {
        let hdr = HdrImage::new(Image::from_vec(1, 3, 1, vec![0.0, 0.5, 16.0]).unwrap()).unwrap();
        assert_eq!(hdr.dynamic_range(), 32.0);
    }
}

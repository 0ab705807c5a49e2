//! Plain row-major image and mask containers.

use crate::error::{Error, Result};

/// Interleaved row-major image with `f64` samples, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} image needs {} samples, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
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
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Sub-image starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {}x{}+{}+{} exceeds {}x{}",
                width, height, x0, y0, self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, self.channels, |x, y, c| {
            self.get(x + x0, y + y0, c)
        }))
    }

    /// Bilinear resize with the pixel-center convention
    /// `src = (dst + 0.5) * scale - 0.5`, clamped to the border.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::new(width, height, self.channels);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let v = (1.0 - wy) * ((1.0 - wx) * self.get(x0, y0, c) + wx * self.get(x1, y0, c))
                        + wy * ((1.0 - wx) * self.get(x0, y1, c) + wx * self.get(x1, y1, c));
                    out.set(x, y, c, v);
                }
            }
        }
        out
    }

    /// Bilinear sample at a continuous location with coordinates clamped to
    /// the pixel-center hull.
    pub fn sample_clamped(&self, x: f64, y: f64, out: &mut [f64]) {
        let fx = x.clamp(0.0, (self.width - 1) as f64);
        let fy = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let wx = fx - x0 as f64;
        let wy = fy - y0 as f64;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = (1.0 - wy) * ((1.0 - wx) * self.get(x0, y0, c) + wx * self.get(x1, y0, c))
                + wy * ((1.0 - wx) * self.get(x0, y1, c) + wx * self.get(x1, y1, c));
        }
    }

    /// Places this image at the top-left of a zero canvas.
    pub fn pad_to(&self, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, self.channels, |x, y, c| {
            if x < self.width && y < self.height {
                self.get(x, y, c)
            } else {
                0.0
            }
        })
    }

    /// Mean over channels, giving a single-channel image.
    pub fn to_gray(&self) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| {
            self.pixel(x, y).iter().sum::<f64>() / self.channels as f64
        })
    }
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} mask needs {} entries, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| self.get(x + x0, y + y0))
    }
}

/// Peak signal-to-noise ratio in dB over pixels selected by `select`, for
/// images in `[0, 1]`. Returns infinity for identical selections.
pub fn psnr(a: &Image, b: &Image, select: impl Fn(usize, usize) -> bool) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !select(x, y) {
                continue;
            }
            for c in 0..a.channels() {
                let d = a.get(x, y, c) - b.get(x, y, c);
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 || sum == 0.0 {
        return f64::INFINITY;
    }
    let mse = sum / n as f64;
    10.0 * (1.0 / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_is_exact() {
        let im = Image::from_fn(5, 4, 2, |x, y, c| (x * 7 + y * 3 + c) as f64 * 0.01);
        assert_eq!(im.resize(5, 4), im);
    }

    #[test]
    fn crop_and_pad() {
        let im = Image::from_fn(4, 4, 1, |x, y, _| (x + 4 * y) as f64);
        let c = im.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[9.0, 10.0, 13.0, 14.0]);
        assert!(im.crop(3, 3, 2, 2).is_err());
        let p = c.pad_to(3, 3);
        assert_eq!(p.get(2, 2, 0), 0.0);
        assert_eq!(p.get(1, 1, 0), 14.0);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let im = Image::filled(3, 3, 3, 0.5);
        assert!(psnr(&im, &im, |_, _| true).is_infinite());
        let other = Image::filled(3, 3, 3, 0.6);
        assert!((psnr(&im, &other, |_, _| true) - 20.0).abs() < 1e-9);
    }
}

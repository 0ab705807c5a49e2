//! Frozen, seeded convolutional feature extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{ConvSpec, Tensor};
use crate::error::{Error, Result};
use crate::geometry::standard_normal;
use crate::image::Image;

/// Channels after each stride-2 stage.
pub const FEATURE_CHANNELS: [usize; 3] = [12, 16, 16];
pub const FEATURE_DIM: usize = 16;
const NORM_EPS: f64 = 1e-3;

/// Three stride-2 3x3 convolutions with tanh. The second stage (1/4
/// resolution) feeds pyramid level 1, the third (1/8) level 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures {
    pub seed: u64,
    convs: Vec<ConvSpec>,
    weights: Vec<f64>,
}

impl FrozenFeatures {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut weights = Vec::new();
        let mut cin = 3;
        for &cout in &FEATURE_CHANNELS {
            let spec = ConvSpec {
                cin,
                cout,
                k: 3,
                stride: 2,
                pad: 1,
                w_off: weights.len(),
                b_off: weights.len() + cout * cin * 9,
            };
            let fan_in = (cin * 9) as f64;
            for _ in 0..cout {
                // Zero-mean filters: flat regions give no response.
                let mut f: Vec<f64> = (0..cin * 9).map(|_| standard_normal(&mut rng)).collect();
                let m = f.iter().sum::<f64>() / f.len() as f64;
                f.iter_mut().for_each(|v| *v = (*v - m) * 1.5 / fan_in.sqrt());
                weights.extend(f);
            }
            weights.extend(std::iter::repeat(0.0).take(cout));
            convs.push(spec);
            cin = cout;
        }
        Self { seed, convs, weights }
    }

    /// `(level1, level0)` unit-normalized feature grids.
    pub fn forward(&self, image: &Image) -> Result<(Tensor, Tensor)> {
        if image.width() % 8 != 0 || image.height() % 8 != 0 || image.width() == 0 || image.height() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} is not divisible by 8",
                image.width(),
                image.height()
            )));
        }
        let gray3 = image_tensor(image);
        let mut x = gray3;
        let mut outs = Vec::new();
        for conv in &self.convs {
            let mut y = conv.forward(&self.weights, &x);
            y.data.iter_mut().for_each(|v| *v = v.tanh());
            outs.push(y.clone());
            x = y;
        }
        let mut l0 = outs.pop().unwrap();
        let mut l1 = outs.pop().unwrap();
        normalize_channels(&mut l1);
        normalize_channels(&mut l0);
        Ok((l1, l0))
    }
}

/// Centered RGB tensor `2 (I - 1/2)`; gray images are replicated.
fn image_tensor(image: &Image) -> Tensor {
    let (w, h) = (image.width(), image.height());
    let mut t = Tensor::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(x, y);
            for c in 0..3 {
                t.data[(c * h + y) * w + x] = 2.0 * (p[c.min(p.len() - 1)] - 0.5);
            }
        }
    }
    t
}

fn normalize_channels(t: &mut Tensor) {
    let hw = t.h * t.w;
    for p in 0..hw {
        let n2: f64 = (0..t.c).map(|c| t.data[c * hw + p].powi(2)).sum();
        let s = 1.0 / (n2 + NORM_EPS * NORM_EPS).sqrt();
        for c in 0..t.c {
            t.data[c * hw + p] *= s;
        }
    }
}

/// Features of `image` at pyramid `level` (0 = 1/8, 1 = 1/4).
pub fn extract_features(extractor: &FrozenFeatures, image: &Image, level: usize) -> Result<Tensor> {
    let (l1, l0) = extractor.forward(image)?;
    match level {
        0 => Ok(l0),
        1 => Ok(l1),
        _ => Err(Error::Config(format!("no pyramid level {level}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{noise_texture, TextureSpec};

    #[test]
    fn constant_image_gives_constant_interior_features() {
        let ex = FrozenFeatures::new(1);
        let im = Image::filled(32, 32, 3, 0.7);
        let f = extract_features(&ex, &im, 1).unwrap();
        for c in 0..f.c {
            let v = f.at(0, c, 3, 3);
            for y in 2..6 {
                for x in 2..6 {
                    assert!((f.at(0, c, y, x) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn seeded_filters_are_reproducible() {
        assert_eq!(FrozenFeatures::new(5), FrozenFeatures::new(5));
        assert_ne!(FrozenFeatures::new(5), FrozenFeatures::new(6));
    }

    #[test]
    fn features_shift_with_the_image() {
        let ex = FrozenFeatures::new(2);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let big = noise_texture(64, 64, &TextureSpec::default(), &mut r);
        let a = big.crop(0, 0, 48, 48).unwrap();
        let b = big.crop(8, 8, 48, 48).unwrap();
        for level in 0..2 {
            let s = if level == 0 { 1 } else { 2 };
            let fa = extract_features(&ex, &a, level).unwrap();
            let fb = extract_features(&ex, &b, level).unwrap();
            let margin = s;
            for c in 0..fa.c {
                for y in margin..fa.h - margin {
                    for x in margin..fa.w - margin {
                        assert!((fa.at(0, c, y + s, x + s) - fb.at(0, c, y, x)).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let ex = FrozenFeatures::new(0);
        assert!(ex.forward(&Image::new(30, 32, 3)).is_err());
    }
}

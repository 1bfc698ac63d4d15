//! Images, intermediate-domain generation, and spatial augmentation.

mod pnm;

pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{channels} channels")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                op: "image",
                left: vec![height, width, channels],
                right: vec![pixels.len()],
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.height * self.width).max(1) as f64;
        (0..self.channels)
            .map(|c| self.pixels.iter().skip(c).step_by(self.channels).sum::<f64>() / n)
            .collect()
    }

    /// Pixels in planar `[C, H, W]` order, the layout convolutions consume.
    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.pixels.len());
        for c in 0..self.channels {
            out.extend(self.pixels.iter().skip(c).step_by(self.channels));
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.pixels.iter().map(|v| v * s).collect(),
        )
    }
}

/// Channel weights of a random linear combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl MixWeights {
    pub const EQUAL: MixWeights = MixWeights {
        alpha: 1.0 / 3.0,
        beta: 1.0 / 3.0,
        gamma: 1.0 / 3.0,
    };

    /// Independent `U(0,1)` draws; redrawn in the measure-zero case of a
    /// vanishing sum.
    pub fn sample(rng: &mut impl Rng) -> Self {
        loop {
            let w = MixWeights {
                alpha: rng.random(),
                beta: rng.random(),
                gamma: rng.random(),
            };
            if w.total() > 0.0 {
                return w;
            }
        }
    }

    pub fn total(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }
}

fn require_rgb(img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            found: img.channels,
        });
    }
    Ok(())
}

/// `(αR + βG + γB) / (α + β + γ)` at every pixel.
pub fn mix_channels(img: &Image, w: MixWeights) -> Result<Image> {
    require_rgb(img)?;
    if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0 && w.total() > 0.0) {
        return Err(Error::InvalidArgument(format!("mix weights {w:?}")));
    }
    let total = w.total();
    // Equal weights are the plain channel mean; computing it directly keeps
    // grayscale bit-identical to `(R + G + B) / 3`.
    let equal = w.alpha == w.beta && w.beta == w.gamma;
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let v = if equal {
                (p[0] + p[1] + p[2]) / 3.0
            } else {
                (w.alpha * p[0] + w.beta * p[1] + w.gamma * p[2]) / total
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(Image {
        height: img.height,
        width: img.width,
        channels: 1,
        pixels,
    })
}

/// Intermediate-domain image: one fresh set of uniform weights for the whole image.
pub fn random_channel_mix(img: &Image, rng: &mut impl Rng) -> Result<(Image, MixWeights)> {
    require_rgb(img)?;
    let w = MixWeights::sample(rng);
    Ok((mix_channels(img, w)?, w))
}

/// Equal-weight member of the channel-mix family.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    mix_channels(img, MixWeights::EQUAL)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub target_h: usize,
    pub target_w: usize,
    pub pad_fraction: f64,
    pub pad_mode: PadMode,
    pub flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            target_h: 48,
            target_w: 24,
            pad_fraction: 0.125,
            pad_mode: PadMode::Zero,
            flip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    fn validate(&self) -> Result<()> {
        if self.target_h == 0
            || self.target_w == 0
            || !(0.0..=1.0).contains(&self.pad_fraction)
            || !(0.0..=1.0).contains(&self.flip_prob)
        {
            return Err(Error::InvalidArgument(format!("augment policy {self:?}")));
        }
        Ok(())
    }

    /// Border thickness in pixels along (rows, columns).
    pub fn padding(&self) -> (usize, usize) {
        (
            (self.pad_fraction * self.target_h as f64).round() as usize,
            (self.pad_fraction * self.target_w as f64).round() as usize,
        )
    }
}

/// Bilinear resize with half-pixel centers; the identity when extents match.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if height == img.height && width == img.width {
        return img.clone();
    }
    let c = img.channels;
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, sx, img.width);
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height,
        width,
        channels: c,
        pixels,
    }
}

/// Surrounds the image with a border of `pad_y` rows and `pad_x` columns.
pub fn pad(img: &Image, pad_y: usize, pad_x: usize, mode: PadMode) -> Image {
    let c = img.channels;
    let fill = match mode {
        PadMode::Zero => vec![0.0; c],
        PadMode::Mean => img.channel_means(),
    };
    let (h, w) = (img.height + 2 * pad_y, img.width + 2 * pad_x);
    let mut pixels = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let inside = y >= pad_y && y < pad_y + img.height && x >= pad_x && x < pad_x + img.width;
            if inside {
                let base = ((y - pad_y) * img.width + (x - pad_x)) * c;
                pixels.extend_from_slice(&img.pixels[base..base + c]);
            } else {
                pixels.extend_from_slice(&fill);
            }
        }
    }
    Image {
        height: h,
        width: w,
        channels: c,
        pixels,
    }
}

pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    if top + height > img.height || left + width > img.width {
        return Err(Error::InvalidArgument(format!(
            "crop {height}x{width}+{top}+{left} exceeds {}x{}",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let mut pixels = Vec::with_capacity(height * width * c);
    for y in top..top + height {
        let base = (y * img.width + left) * c;
        pixels.extend_from_slice(&img.pixels[base..base + width * c]);
    }
    Ok(Image {
        height,
        width,
        channels: c,
        pixels,
    })
}

pub fn flip_horizontal(img: &Image) -> Image {
    let c = img.channels;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            let base = (y * img.width + x) * c;
            pixels.extend_from_slice(&img.pixels[base..base + c]);
        }
    }
    Image {
        pixels,
        ..img.clone()
    }
}

/// Resize, pad, random crop back to the target extents, random horizontal flip.
pub fn augment(img: &Image, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Image> {
    policy.validate()?;
    let resized = resize_bilinear(img, policy.target_h, policy.target_w);
    let (py, px) = policy.padding();
    let padded = pad(&resized, py, px, policy.pad_mode);
    let top = rng.random_range(0..=2 * py);
    let left = rng.random_range(0..=2 * px);
    let out = crop(&padded, top, left, policy.target_h, policy.target_w)?;
    // The flip draw is always consumed so the stream stays aligned across policies.
    let flip = rng.random::<f64>() < policy.flip_prob;
    Ok(if flip { flip_horizontal(&out) } else { out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn rgb(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream(seed, Purpose::Probe, 0, 0);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn equal_weights_give_channel_mean() {
        let img = Image::new(1, 1, 3, vec![0.3, 0.6, 0.9]).unwrap();
        let w = MixWeights {
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.4,
        };
        assert_eq!(mix_channels(&img, w).unwrap().pixels()[0], 0.6);
    }

    #[test]
    fn red_only_weights_copy_red_channel() {
        let img = rgb(5, 4, 1);
        let w = MixWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let out = mix_channels(&img, w).unwrap();
        let red: Vec<f64> = img.pixels().iter().step_by(3).copied().collect();
        assert_eq!(out.pixels(), red.as_slice());
    }

    #[test]
    fn single_channel_input_rejected() {
        let img = Image::filled(2, 2, 1, 0.5).unwrap();
        let mut rng = stream(0, Purpose::Mix, 0, 0);
        assert!(matches!(
            random_channel_mix(&img, &mut rng),
            Err(Error::ChannelMismatch { expected: 3, found: 1 })
        ));
        assert!(to_grayscale(&img).is_err());
    }

    #[test]
    fn grayscale_examples() {
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_grayscale(&red).unwrap().pixels()[0], 1.0 / 3.0);
        let constant = Image::filled(3, 2, 3, 0.7).unwrap();
        for &v in to_grayscale(&constant).unwrap().pixels() {
            assert!((v - 0.7).abs() < 1e-15);
        }
        let img = rgb(4, 3, 9);
        assert_eq!(to_grayscale(&img).unwrap(), mix_channels(&img, MixWeights::EQUAL).unwrap());
    }

    #[test]
    fn mix_is_reproducible_from_seed() {
        let img = rgb(6, 3, 2);
        let a = random_channel_mix(&img, &mut stream(5, Purpose::Mix, 1, 1)).unwrap();
        let b = random_channel_mix(&img, &mut stream(5, Purpose::Mix, 1, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_op_policy_is_plain_resize() {
        let img = rgb(12, 6, 3);
        let policy = AugmentPolicy {
            target_h: 8,
            target_w: 4,
            pad_fraction: 0.0,
            pad_mode: PadMode::Zero,
            flip_prob: 0.0,
        };
        let out = augment(&img, &policy, &mut stream(1, Purpose::Batch, 0, 0)).unwrap();
        assert_eq!(out, resize_bilinear(&img, 8, 4));
    }

    #[test]
    fn resize_to_same_extents_is_identity() {
        let img = rgb(5, 7, 4);
        assert_eq!(resize_bilinear(&img, 5, 7), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = rgb(5, 7, 5);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn mean_padding_uses_image_mean() {
        let img = rgb(6, 4, 6);
        let means = img.channel_means();
        let padded = pad(&img, 2, 1, PadMode::Mean);
        for y in 0..padded.height() {
            for x in 0..padded.width() {
                let border = !(2..8).contains(&y) || !(1..5).contains(&x);
                if border {
                    for (c, m) in means.iter().enumerate() {
                        assert!((padded.get(y, x, c) - m).abs() < 1e-9);
                    }
                }
            }
        }
        let zero = pad(&img, 1, 1, PadMode::Zero);
        assert_eq!(zero.get(0, 0, 0), 0.0);
    }

    proptest! {
        #[test]
        fn mix_stays_within_channel_range(seed in any::<u64>()) {
            let img = rgb(4, 4, seed);
            let (out, _) = random_channel_mix(&img, &mut stream(seed, Purpose::Mix, 0, 0)).unwrap();
            for (p, &z) in img.pixels().chunks(3).zip(out.pixels()) {
                let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(z >= lo && z <= hi);
            }
        }

        #[test]
        fn mix_is_scale_equivariant(seed in any::<u64>(), s in 0.01f64..=1.0) {
            let img = rgb(3, 3, seed);
            let w = MixWeights::sample(&mut stream(seed, Purpose::Mix, 0, 0));
            let a = mix_channels(&img.scaled(s).unwrap(), w).unwrap();
            let b = mix_channels(&img, w).unwrap().scaled(s).unwrap();
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn augment_stays_in_unit_range(seed in any::<u64>(), mean in any::<bool>()) {
            let img = rgb(10, 5, seed);
            let policy = AugmentPolicy {
                target_h: 16,
                target_w: 8,
                pad_fraction: 0.25,
                pad_mode: if mean { PadMode::Mean } else { PadMode::Zero },
                flip_prob: 0.5,
            };
            let out = augment(&img, &policy, &mut stream(seed, Purpose::Batch, 0, 0)).unwrap();
            prop_assert_eq!((out.height(), out.width()), (16, 8));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

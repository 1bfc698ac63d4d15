//! Synthetic cross-modal identities.
//!
//! Each identity owns a texture (two plaid patterns, one per body half)
//! that both modalities render, and a hue that only the visible modality
//! renders. Within visible data the hue separates identities easily; across
//! modalities it is pure distraction, so a model that leans on it matches
//! infrared queries poorly.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::modality::Modality;
use crate::rng::{stream, Purpose};

/// Texture contrast at full strength.
const TEXTURE_AMPLITUDE: f64 = 0.3;
/// Visible hue offset at full strength.
const HUE_AMPLITUDE: f64 = 0.15;
const CAMERA_OFFSET: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Training identities.
    pub num_identities: usize,
    /// Held-out identities, disjoint from the training ones.
    pub num_test_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub height: usize,
    pub width: usize,
    pub num_cameras_v: usize,
    pub num_cameras_i: usize,
    pub color_signal_strength: f64,
    pub texture_signal_strength: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_level: f64,
    /// Per-sample pose variation in `[0, 1]`: grating phase shift and body split jitter.
    pub pose_jitter: f64,
    /// Round pixels to 8-bit levels so images survive PPM/PGM export unchanged.
    pub quantize: bool,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 20,
            num_test_identities: 20,
            images_per_identity_per_modality: 8,
            height: 48,
            width: 24,
            num_cameras_v: 2,
            num_cameras_i: 2,
            color_signal_strength: 1.0,
            texture_signal_strength: 1.0,
            noise_level: 0.03,
            pose_jitter: 0.25,
            quantize: true,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.num_identities == 0
            || self.images_per_identity_per_modality == 0
            || self.height < 2
            || self.width < 2
            || self.num_cameras_v == 0
            || self.num_cameras_i == 0
            || !unit(self.color_signal_strength)
            || !unit(self.texture_signal_strength)
            || !unit(self.pose_jitter)
            || !(self.noise_level >= 0.0 && self.noise_level.is_finite())
        {
            return Err(Error::InvalidArgument(format!("synthetic config {self:?}")));
        }
        Ok(())
    }
}

pub struct SynthDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Separable plaid `cos(2π fx x + φ) · cos(2π fy y + φ)`. A horizontal flip
/// only shifts its phase, so identity survives mirroring.
#[derive(Clone, Copy, Debug)]
struct Plaid {
    /// Cycles per pixel along columns and rows.
    fx: f64,
    fy: f64,
}

impl Plaid {
    fn random(rng: &mut impl Rng) -> Self {
        let theta = rng.random_range(0.0..PI / 2.0);
        let freq = rng.random_range(0.08..0.35);
        Plaid {
            fx: freq * theta.cos(),
            fy: freq * theta.sin(),
        }
    }

    fn at(&self, y: f64, x: f64, phase: f64) -> f64 {
        (2.0 * PI * self.fx * x + phase).cos() * (2.0 * PI * self.fy * y + phase).cos()
    }
}

#[derive(Clone, Debug)]
struct Identity {
    upper: Plaid,
    lower: Plaid,
    /// Zero-centered hue in `[-1, 1]^3`.
    hue: [f64; 3],
}

struct Cameras {
    visible_tint: Vec<[f64; 3]>,
    infrared_offset: Vec<f64>,
}

/// Texture field of one sample, in `[-1, 1]`.
fn texture(id: &Identity, h: usize, w: usize, phase: f64, split: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let g = if (y as f64) < split { &id.upper } else { &id.lower };
        for x in 0..w {
            out.push(g.at(y as f64, x as f64, phase));
        }
    }
    out
}

fn finish(v: f64, quantize: bool) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if quantize {
        (v * 255.0).round() / 255.0
    } else {
        v
    }
}

/// Deterministic under `cfg.rng_seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut world = stream(cfg.rng_seed, Purpose::Synth, 0, 0);
    let total = cfg.num_identities + cfg.num_test_identities;
    let identities: Vec<Identity> = (0..total)
        .map(|_| Identity {
            upper: Plaid::random(&mut world),
            lower: Plaid::random(&mut world),
            hue: [0; 3].map(|_| world.random_range(-1.0..1.0)),
        })
        .collect();
    let cameras = Cameras {
        visible_tint: (0..cfg.num_cameras_v)
            .map(|_| [0; 3].map(|_| world.random_range(-CAMERA_OFFSET..CAMERA_OFFSET)))
            .collect(),
        infrared_offset: (0..cfg.num_cameras_i)
            .map(|_| world.random_range(-CAMERA_OFFSET..CAMERA_OFFSET))
            .collect(),
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, identity) in identities.iter().enumerate() {
        let mut rng = stream(cfg.rng_seed, Purpose::Synth, 1 + idx as u64, 0);
        let target = if idx < cfg.num_identities { &mut train } else { &mut test };
        for k in 0..cfg.images_per_identity_per_modality {
            for modality in [Modality::Visible, Modality::Infrared] {
                target.push(render(cfg, identity, &cameras, modality, k, idx as u32, &mut rng)?);
            }
        }
    }
    Ok(SynthDataset {
        train: Dataset::new(train, Split::Train)?,
        test: Dataset::new(test, Split::Test)?,
    })
}

fn render(
    cfg: &SynthConfig,
    identity: &Identity,
    cameras: &Cameras,
    modality: Modality,
    k: usize,
    id: u32,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let phase = rng.random_range(-1.0..=1.0) * PI * cfg.pose_jitter;
    let split = h as f64 * (0.5 + 0.25 * cfg.pose_jitter * rng.random_range(-1.0..=1.0));
    let tex = texture(identity, h, w, phase, split);
    let ts = TEXTURE_AMPLITUDE * cfg.texture_signal_strength;
    let mut noise = || -> f64 {
        if cfg.noise_level > 0.0 {
            cfg.noise_level * Distribution::<f64>::sample(&StandardNormal, rng)
        } else {
            0.0
        }
    };
    let (camera, image) = match modality {
        Modality::Visible => {
            let cam = k % cfg.num_cameras_v;
            let tint = cameras.visible_tint[cam];
            let cs = HUE_AMPLITUDE * cfg.color_signal_strength;
            let mut px = Vec::with_capacity(h * w * 3);
            for &t in &tex {
                for (hue, tint) in identity.hue.iter().zip(tint) {
                    let v = 0.5 + ts * t + cs * hue + tint + noise();
                    px.push(finish(v, cfg.quantize));
                }
            }
            (cam, Image::new(h, w, 3, px)?)
        }
        _ => {
            let cam = k % cfg.num_cameras_i;
            let offset = cameras.infrared_offset[cam];
            let px = tex
                .iter()
                .map(|&t| finish(0.5 + ts * t + offset + noise(), cfg.quantize))
                .collect();
            (cam + cfg.num_cameras_v, Image::new(h, w, 1, px)?)
        }
    };
    Sample::new(image, id, camera as u32, modality)
}

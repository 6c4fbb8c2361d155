use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Edge-replicated padding before the random crop; 0 disables cropping.
    pub crop_pad: usize,
    /// Relative brightness/contrast range per channel.
    pub jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_pad: 4,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            crop_pad: 0,
            jitter: 0.0,
        }
    }
}

pub fn flip_horizontal(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out.set(y, x, c, image.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

fn pad_crop(image: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        let sy = (y + dy).saturating_sub(pad).min(h - 1);
        for x in 0..w {
            let sx = (x + dx).saturating_sub(pad).min(w - 1);
            for c in 0..CHANNELS {
                out.set(y, x, c, image.get(sy, sx, c));
            }
        }
    }
    out
}

fn jitter(image: &mut Image, brightness: [f32; 3], contrast: [f32; 3]) {
    let n = (image.height() * image.width()) as f32;
    let mut mean = [0.0f32; 3];
    for px in image.data().chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            mean[c] += px[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for px in image.data_mut().chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = ((px[c] - mean[c]) * contrast[c] + mean[c]) * brightness[c];
        }
    }
    image.clamp01();
}

/// Random flip, pad-and-crop and per-channel brightness/contrast jitter;
/// deterministic in `seed`.
pub fn augment(image: &Image, cfg: &AugmentConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let (dy, dx) = if cfg.crop_pad > 0 {
        let span = 0..=2 * cfg.crop_pad;
        (rng.random_range(span.clone()), rng.random_range(span))
    } else {
        (0, 0)
    };
    let mut out = if flip { flip_horizontal(image) } else { image.clone() };
    if cfg.crop_pad > 0 {
        out = pad_crop(&out, cfg.crop_pad, dy, dx);
    }
    if cfg.jitter > 0.0 {
        let j = cfg.jitter;
        let b = [0; 3].map(|_| 1.0 + rng.random_range(-j..=j));
        let k = [0; 3].map(|_| 1.0 + rng.random_range(-j..=j));
        jitter(&mut out, b, k);
    }
    out
}

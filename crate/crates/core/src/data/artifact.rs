use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;

/// Generator fingerprint added to fake images. Every variant is the
/// identity at amplitude 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Artifact {
    /// Product of horizontal and vertical sinusoids with the given period
    /// in pixels.
    SinusoidalGrid { amplitude: f32, period: f32 },
    /// Alternating ±amplitude on the pixel lattice, as left by strided
    /// transposed convolutions.
    CheckerboardUpsample { amplitude: f32 },
    /// Blend toward 4×4 block averages.
    BlurBlock { amplitude: f32 },
    /// Concentric cosine rings around the image center.
    RingSpectrum { amplitude: f32, period: f32 },
    /// Constant color cast plus Gaussian noise.
    NoiseTint { amplitude: f32, tint: [f32; 3] },
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::SinusoidalGrid { .. } => "sinusoidal-grid",
            Artifact::CheckerboardUpsample { .. } => "checkerboard-upsample",
            Artifact::BlurBlock { .. } => "blur-block",
            Artifact::RingSpectrum { .. } => "ring-spectrum",
            Artifact::NoiseTint { .. } => "noise-tint",
        }
    }

    pub fn amplitude(&self) -> f32 {
        match *self {
            Artifact::SinusoidalGrid { amplitude, .. }
            | Artifact::CheckerboardUpsample { amplitude }
            | Artifact::BlurBlock { amplitude }
            | Artifact::RingSpectrum { amplitude, .. }
            | Artifact::NoiseTint { amplitude, .. } => amplitude,
        }
    }
}

const GRID_PHASE: f32 = std::f32::consts::FRAC_PI_4;

/// Applies `artifact` to `image`. Periodic patterns are locked to the pixel
/// grid, as an upsampling fingerprint would be; only the tint noise depends
/// on `seed`. The result is clamped to `[0, 1]`.
pub fn apply_artifact(image: &Image, artifact: &Artifact, seed: u64) -> Image {
    if artifact.amplitude() == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    let tau = std::f32::consts::TAU;
    match *artifact {
        Artifact::SinusoidalGrid { amplitude, period } => {
            let (px, py) = (GRID_PHASE, GRID_PHASE);
            for y in 0..h {
                let sy = (tau * y as f32 / period + py).sin();
                for x in 0..w {
                    let d = amplitude * (tau * x as f32 / period + px).sin() * sy;
                    for c in 0..3 {
                        out.set(y, x, c, out.get(y, x, c) + d);
                    }
                }
            }
        }
        Artifact::CheckerboardUpsample { amplitude } => {
            for y in 0..h {
                for x in 0..w {
                    let d = if (x + y) % 2 == 0 { amplitude } else { -amplitude };
                    for c in 0..3 {
                        out.set(y, x, c, out.get(y, x, c) + d);
                    }
                }
            }
        }
        Artifact::BlurBlock { amplitude } => {
            const B: usize = 4;
            for by in (0..h).step_by(B) {
                for bx in (0..w).step_by(B) {
                    let (ye, xe) = ((by + B).min(h), (bx + B).min(w));
                    let n = ((ye - by) * (xe - bx)) as f32;
                    for c in 0..3 {
                        let mut sum = 0.0;
                        for y in by..ye {
                            for x in bx..xe {
                                sum += image.get(y, x, c);
                            }
                        }
                        let mean = sum / n;
                        for y in by..ye {
                            for x in bx..xe {
                                let v = image.get(y, x, c);
                                out.set(y, x, c, v + amplitude * (mean - v));
                            }
                        }
                    }
                }
            }
        }
        Artifact::RingSpectrum { amplitude, period } => {
            let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
            for y in 0..h {
                for x in 0..w {
                    let r = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                    let d = amplitude * (tau * r / period).cos();
                    for c in 0..3 {
                        out.set(y, x, c, out.get(y, x, c) + d);
                    }
                }
            }
        }
        Artifact::NoiseTint { amplitude, tint } => {
            let noise = Normal::new(0.0f32, 0.5).expect("valid std");
            for y in 0..h {
                for x in 0..w {
                    for (c, t) in tint.iter().enumerate() {
                        let d = amplitude * (t + noise.sample(&mut rng));
                        out.set(y, x, c, out.get(y, x, c) + d);
                    }
                }
            }
        }
    }
    out.clamp01();
    out
}

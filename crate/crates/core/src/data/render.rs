use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SHAPE_CLASSES;
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_IMAGE_SIZE: usize = 32;

/// Sub-pixel offsets for 2×2 supersampling.
const SUBSAMPLES: [(f32, f32); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Stripe,
}

impl Shape {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "circle" => Shape::Circle,
            "square" => Shape::Square,
            "triangle" => Shape::Triangle,
            "cross" => Shape::Cross,
            "ring" => Shape::Ring,
            "stripe" => Shape::Stripe,
            other => return Err(Error::UnknownClass(other.to_string())),
        })
    }

    /// Inside test in shape-local coordinates, `r` the nominal radius.
    fn contains(self, dx: f32, dy: f32, r: f32, angle: f32) -> bool {
        let (s, c) = angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up, base at v = 0.6r
                let h = 1.6 * r;
                let t = (v + r) / h;
                (0.0..=1.0).contains(&t) && u.abs() <= t * r
            }
            Shape::Cross => {
                let arm = 0.3 * r;
                (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
            }
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            Shape::Stripe => v.abs() <= 0.25 * r && u.abs() <= 1.3 * r,
        }
    }
}

fn colors(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    let dark_bg = rng.random_bool(0.5);
    let (bg_lum, fg_lum) = if dark_bg {
        (rng.random_range(0.05..0.35), rng.random_range(0.65..0.95))
    } else {
        (rng.random_range(0.65..0.95), rng.random_range(0.05..0.35))
    };
    let mut tint = |l: f32| {
        [0; 3].map(|_| (l + rng.random_range(-0.12f32..0.12)).clamp(0.0, 1.0))
    };
    (tint(bg_lum), tint(fg_lum))
}

/// A `size × size` image of `class` at a random position, scale, rotation
/// and color; deterministic in `seed`.
pub fn render_content_sized(class: &str, size: usize, seed: u64) -> Result<Image> {
    let shape = Shape::parse(class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let r = rng.random_range(0.22..0.32) * s;
    let margin = r * 1.1;
    let cx = rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-3));
    let cy = rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-3));
    let angle = match shape {
        Shape::Circle | Shape::Ring | Shape::Triangle => 0.0,
        _ => rng.random_range(0.0..std::f32::consts::PI),
    };
    let (bg, fg) = colors(&mut rng);
    let noise = Normal::new(0.0f32, 0.015).expect("valid std");

    let mut img = Image::filled(size, size, bg);
    for y in 0..size {
        for x in 0..size {
            let hits = SUBSAMPLES
                .iter()
                .filter(|(ox, oy)| shape.contains(x as f32 + ox - cx, y as f32 + oy - cy, r, angle))
                .count();
            let cover = hits as f32 / SUBSAMPLES.len() as f32;
            for c in 0..3 {
                let v = bg[c] * (1.0 - cover) + fg[c] * cover + noise.sample(&mut rng);
                img.set(y, x, c, v);
            }
        }
    }
    img.clamp01();
    Ok(img)
}

pub fn render_content(class: &str, seed: u64) -> Result<Image> {
    render_content_sized(class, DEFAULT_IMAGE_SIZE, seed)
}

/// Checks that `class` names one of the generator's shapes.
pub fn check_class(class: &str) -> Result<()> {
    if SHAPE_CLASSES.contains(&class) {
        Ok(())
    } else {
        Err(Error::UnknownClass(class.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        for class in SHAPE_CLASSES {
            let a = render_content(class, 42).unwrap();
            let b = render_content(class, 42).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.height(), a.width()), (32, 32));
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn classes_differ_under_one_seed() {
        let imgs: Vec<Image> = SHAPE_CLASSES.iter().map(|c| render_content(c, 5).unwrap()).collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }

    #[test]
    fn unknown_class() {
        assert!(matches!(render_content("zebra", 0), Err(Error::UnknownClass(_))));
        assert!(check_class("ring").is_ok());
    }

    #[test]
    fn shape_covers_some_pixels() {
        let img = render_content("cross", 1).unwrap();
        let first = &img.data()[..3];
        let differs = img.data().chunks(3).filter(|p| (p[0] - first[0]).abs() > 0.2).count();
        assert!(differs > 20);
    }
}

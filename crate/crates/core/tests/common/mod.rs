#![allow(dead_code)]

use p2g_core::domain::{DomainCentroidBank, TauMode};
use p2g_core::encoder::{DualEncoder, DualEncoderWeights, EncoderConfig, Vocabulary};
use p2g_core::prompt_bank::{init_task_prompts, PromptBank};
use p2g_core::Image;
use p2g_numerics::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small architecture with a few knobs drawn from `rng`.
pub fn micro_config(rng: &mut ChaCha8Rng) -> EncoderConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let width = heads * [4, 8][rng.random_range(0..2)];
    EncoderConfig {
        image_size: 16,
        patch_size: [4, 8][rng.random_range(0..2)],
        vision_width: width,
        vision_layers: rng.random_range(1..=2),
        vision_heads: heads,
        vision_context: 96,
        text_width: width,
        text_layers: rng.random_range(1..=2),
        text_heads: heads,
        context_length: 64,
        embed_dim: 8,
        mlp_ratio: 2,
        causal_text: rng.random_bool(0.5),
    }
}

pub fn fixed_micro_config() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 8,
        vision_width: 16,
        vision_layers: 2,
        vision_heads: 2,
        vision_context: 96,
        text_width: 16,
        text_layers: 2,
        text_heads: 2,
        context_length: 64,
        embed_dim: 8,
        mlp_ratio: 2,
        causal_text: false,
    }
}

pub fn weights(cfg: &EncoderConfig, seed: u64) -> (DualEncoderWeights<f32>, Vocabulary) {
    let vocab = Vocabulary::with_default_words(cfg.context_length).unwrap();
    (DualEncoderWeights::init(cfg, vocab.len(), seed).unwrap(), vocab)
}

pub fn encoder(cfg: &EncoderConfig, seed: u64) -> DualEncoder {
    let (w, v) = weights(cfg, seed);
    DualEncoder::new(w, v).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(size, size, data).unwrap()
}

pub fn random_prompts<T: Real>(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor<T> {
    let data = (0..l * d).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    Tensor::matrix(l, d, data).unwrap()
}

/// A bank of `t` frozen tasks with random prompts.
pub fn random_bank(cfg: &EncoderConfig, t: usize, l: usize, seed: u64) -> PromptBank {
    let mut bank = PromptBank::new(l, cfg.vision_width, cfg.text_width);
    for k in 1..=t {
        let mut p = init_task_prompts(k, l, cfg.vision_width, cfg.text_width, seed + k as u64).unwrap();
        p.mark_trained();
        bank.append_task(p).unwrap();
    }
    bank
}

/// `t` tasks of `k` random unit-scale centroids in the joint space.
pub fn random_centroids(dim: usize, t: usize, k: usize, seed: u64) -> DomainCentroidBank {
    let mut r = rng(seed);
    let mut bank = DomainCentroidBank::new(k, dim);
    for _ in 0..t {
        let c = (0..k)
            .map(|_| (0..dim).map(|_| r.random_range(-0.5..0.5)).collect())
            .collect();
        bank.append(c, TauMode::Fixed(0.5)).unwrap();
    }
    bank
}

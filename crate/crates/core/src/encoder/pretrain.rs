//! Contrastive image/caption pre-alignment of the micro dual encoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use p2g_numerics::{Graph, NodeId, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{bind, embed_image, embed_text, patchify, text_ids, text_view, tower_forward, vision_view};
use super::vocab::Vocabulary;
use super::weights::{DualEncoderWeights, EncoderConfig, Towers, MAX_LOG_LOGIT_SCALE};
use super::DualEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::trainer::{augment, AugmentConfig};

/// Adam with linear warm-up and cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Apply the training augmentations to every sampled image.
    pub augment: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 48,
            lr: 2e-3,
            warmup_steps: 30,
            grad_clip: 1.0,
            augment: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Training loss per step.
    pub losses: Vec<f64>,
    pub checksum: u32,
}

/// One `(image, caption)` training pair.
pub type Caption = (Image, String);

struct Batch<'a> {
    images: Vec<Image>,
    /// Caption index per image, into `captions`.
    caption_of: Vec<usize>,
    captions: Vec<&'a str>,
}

fn make_batch<'a>(pairs: &'a [Caption], idx: &[usize], aug: Option<(&AugmentConfig, u64)>) -> Batch<'a> {
    let mut captions: Vec<&str> = Vec::new();
    let mut caption_of = Vec::with_capacity(idx.len());
    let mut images = Vec::with_capacity(idx.len());
    for (n, &i) in idx.iter().enumerate() {
        let (img, cap) = &pairs[i];
        let c = match captions.iter().position(|c| *c == cap.as_str()) {
            Some(c) => c,
            None => {
                captions.push(cap);
                captions.len() - 1
            }
        };
        caption_of.push(c);
        images.push(match aug {
            Some((a, seed)) => augment(img, a, seed.wrapping_add(n as u64)),
            None => img.clone(),
        });
    }
    Batch {
        images,
        caption_of,
        captions,
    }
}

/// Symmetric contrastive loss with class-aware targets: each image's target
/// is its caption among the batch's distinct captions, and each caption's
/// target is uniform over the images that carry it.
fn batch_loss(
    g: &mut Graph<f32>,
    t: &Towers<NodeId>,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    batch: &Batch<'_>,
) -> Result<NodeId> {
    let mut feats = Vec::with_capacity(batch.images.len());
    for img in &batch.images {
        let orig = embed_image(g, t, patchify(cfg, img)?)?;
        let out = tower_forward(g, vision_view(t, cfg), orig, &[], 0)?;
        feats.push(g.normalize_rows(out.summary)?);
    }
    let mut texts = Vec::with_capacity(batch.captions.len());
    for cap in &batch.captions {
        let ids = text_ids(vocab, cap, 0)?;
        let orig = embed_text(g, t, &ids)?;
        let out = tower_forward(g, text_view(t, cfg), orig, &[], ids.len() - 1)?;
        texts.push(g.normalize_rows(out.summary)?);
    }
    let img = g.concat_rows(&feats)?;
    let txt = g.concat_rows(&texts)?;
    let txt_t = g.transpose(txt)?;
    let sims = g.matmul(img, txt_t)?;
    let scale = g.exp(t.log_logit_scale)?;
    let logits = g.scale_by(sims, scale)?;
    let (b, u) = (batch.images.len(), batch.captions.len());

    let mut i2t = vec![0.0f32; b * u];
    for (i, &c) in batch.caption_of.iter().enumerate() {
        i2t[i * u + c] = 1.0;
    }
    let mut t2i = vec![0.0f32; u * b];
    for c in 0..u {
        let members: Vec<usize> = (0..b).filter(|&i| batch.caption_of[i] == c).collect();
        for &i in &members {
            t2i[c * b + i] = 1.0 / members.len() as f32;
        }
    }
    let l1 = g.soft_cross_entropy(logits, Tensor::matrix(b, u, i2t)?)?;
    let logits_t = g.transpose(logits)?;
    let l2 = g.soft_cross_entropy(logits_t, Tensor::matrix(u, b, t2i)?)?;
    let both = g.add(l1, l2)?;
    Ok(g.scale(both, 0.5)?)
}

/// Contrastive loss of `weights` on `pairs`, no gradients.
pub fn alignment_loss(weights: &DualEncoderWeights<f32>, vocab: &Vocabulary, pairs: &[Caption]) -> Result<f64> {
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let batch = make_batch(pairs, &idx, None);
    let mut g = Graph::new();
    let t = bind(&mut g, &weights.towers, false);
    let loss = batch_loss(&mut g, &t, &weights.config, vocab, &batch)?;
    Ok(g.value(loss).data()[0] as f64)
}

fn lr_at(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-6;

/// Trains a freshly initialized encoder on `pairs` and freezes it.
pub fn pretrain_dual_encoder(
    pairs: &[Caption],
    vocab: Vocabulary,
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(DualEncoder, PretrainReport)> {
    encoder.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::Config("pretrain batch_size must be at least 2".into()));
    }
    let distinct: BTreeMap<&str, ()> = pairs.iter().map(|(_, c)| (c.as_str(), ())).collect();
    if distinct.len() < 2 {
        return Err(Error::Dataset(format!(
            "pre-alignment needs at least 2 distinct captions, got {}",
            distinct.len()
        )));
    }
    for cap in distinct.keys() {
        text_ids(&vocab, cap, 0)?;
    }
    let mut weights = DualEncoderWeights::<f32>::init(encoder, vocab.len(), cfg.seed)?;
    let n_params = weights.towers.params().len();
    let mut m: Vec<Vec<f64>> = weights.towers.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut v = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let aug = AugmentConfig::default();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(pairs.len()) {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let aug_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add((step as u64) << 20);
        let batch = make_batch(pairs, &idx, cfg.augment.then_some((&aug, aug_seed)));

        let mut g = Graph::new();
        let t = bind(&mut g, &weights.towers, true);
        let leaves: Vec<NodeId> = t.params().into_iter().copied().collect();
        let loss = batch_loss(&mut g, &t, encoder, &vocab, &batch)?;
        losses.push(g.value(loss).data()[0] as f64);
        let grads = g.backward(loss, &leaves)?;
        drop(g);

        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = lr_at(cfg, step);
        let bc1 = 1.0 - BETA1.powi(step as i32 + 1);
        let bc2 = 1.0 - BETA2.powi(step as i32 + 1);
        let mut k = 0;
        let towers = weights.towers.map(&mut |p| {
            let (mk, vk, gk) = (&mut m[k], &mut v[k], &grads[k]);
            let mut data = p.data().to_vec();
            for (i, x) in data.iter_mut().enumerate() {
                let gi = gk.data()[i] as f64 * clip;
                mk[i] = BETA1 * mk[i] + (1.0 - BETA1) * gi;
                vk[i] = BETA2 * vk[i] + (1.0 - BETA2) * gi * gi;
                let upd = lr * (mk[i] / bc1) / ((vk[i] / bc2).sqrt() + ADAM_EPS);
                *x = (*x as f64 - upd) as f32;
            }
            k += 1;
            Arc::new(Tensor::new(p.shape().to_vec(), data).expect("finite update"))
        });
        debug_assert_eq!(k, n_params);
        weights.towers = towers;
        let s = weights.towers.log_logit_scale.data()[0];
        if s as f64 > MAX_LOG_LOGIT_SCALE {
            weights.towers.log_logit_scale = Arc::new(Tensor::matrix(1, 1, vec![MAX_LOG_LOGIT_SCALE as f32])?);
        }
    }
    let checksum = weights.checksum();
    let enc = DualEncoder::new(weights, vocab)?;
    Ok((enc, PretrainReport { losses, checksum }))
}

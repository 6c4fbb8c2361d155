//! Parameter trees for the two towers.
//!
//! Every struct is generic over the parameter holder `P`: the frozen weights
//! use `Arc<Tensor<T>>`, a forward pass binds them into a graph as `NodeId`s.
//! [`Towers::visit`] fixes the canonical parameter order used by the
//! checkpoint format, the checksum and the optimizer.

use std::sync::Arc;

use p2g_numerics::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    /// Maximum vision sequence length, prompts included.
    pub vision_context: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Maximum text sequence length, prompts included.
    pub context_length: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    /// Causal attention among original text tokens (CLIP style). Off by default.
    pub causal_text: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            vision_width: 64,
            vision_layers: 4,
            vision_heads: 4,
            vision_context: 64,
            text_width: 64,
            text_layers: 4,
            text_heads: 4,
            context_length: 48,
            embed_dim: 64,
            mlp_ratio: 4,
            causal_text: false,
        }
    }
}

impl EncoderConfig {
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * crate::image::CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.vision_heads == 0 || !self.vision_width.is_multiple_of(self.vision_heads) {
            return bad("vision_width must divide into vision_heads");
        }
        if self.text_heads == 0 || !self.text_width.is_multiple_of(self.text_heads) {
            return bad("text_width must divide into text_heads");
        }
        if self.vision_context < self.n_patches() + 1 {
            return bad("vision_context smaller than the patch sequence");
        }
        if self.context_length < 3 {
            return bad("context_length must be at least 3");
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim and mlp_ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone)]
pub struct Norm<P> {
    pub gain: P,
    pub shift: P,
}

#[derive(Debug, Clone)]
pub struct Block<P> {
    pub norm1: Norm<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub out: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

#[derive(Debug, Clone)]
pub struct VisionTower<P> {
    pub patch: Linear<P>,
    pub class_embedding: P,
    pub positions: P,
    pub norm_pre: Norm<P>,
    pub blocks: Vec<Block<P>>,
    pub norm_post: Norm<P>,
    pub projection: P,
}

#[derive(Debug, Clone)]
pub struct TextTower<P> {
    pub token_embedding: P,
    pub positions: P,
    pub blocks: Vec<Block<P>>,
    pub norm_final: Norm<P>,
    pub projection: P,
}

#[derive(Debug, Clone)]
pub struct Towers<P> {
    pub vision: VisionTower<P>,
    pub text: TextTower<P>,
    /// Natural log of the similarity scale.
    pub log_logit_scale: P,
}

impl<P> Linear<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        f(&self.weight);
        f(&self.bias);
    }
}

impl<P> Norm<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Norm<Q> {
        Norm {
            gain: f(&self.gain),
            shift: f(&self.shift),
        }
    }
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        f(&self.gain);
        f(&self.shift);
    }
}

impl<P> Block<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Block<Q> {
        Block {
            norm1: self.norm1.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            out: self.out.map(f),
            norm2: self.norm2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        self.norm1.visit(f);
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.out.visit(f);
        self.norm2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
}

impl<P> VisionTower<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> VisionTower<Q> {
        VisionTower {
            patch: self.patch.map(f),
            class_embedding: f(&self.class_embedding),
            positions: f(&self.positions),
            norm_pre: self.norm_pre.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            norm_post: self.norm_post.map(f),
            projection: f(&self.projection),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        self.patch.visit(f);
        f(&self.class_embedding);
        f(&self.positions);
        self.norm_pre.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.norm_post.visit(f);
        f(&self.projection);
    }
}

impl<P> TextTower<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> TextTower<Q> {
        TextTower {
            token_embedding: f(&self.token_embedding),
            positions: f(&self.positions),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            norm_final: self.norm_final.map(f),
            projection: f(&self.projection),
        }
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        f(&self.token_embedding);
        f(&self.positions);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.norm_final.visit(f);
        f(&self.projection);
    }
}

impl<P> Towers<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Towers<Q> {
        Towers {
            vision: self.vision.map(f),
            text: self.text.map(f),
            log_logit_scale: f(&self.log_logit_scale),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        self.vision.visit(f);
        self.text.visit(f);
        f(&self.log_logit_scale);
    }

    pub fn params(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }
}

pub type Param<T> = Arc<Tensor<T>>;

/// Frozen dual-encoder weights.
#[derive(Debug, Clone)]
pub struct DualEncoderWeights<T: Real = f32> {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub towers: Towers<Param<T>>,
}

/// Upper bound on the similarity scale, as in CLIP.
pub const MAX_LOG_LOGIT_SCALE: f64 = 4.605_170_185_988_092; // ln(100)

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Param<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Arc::new(Tensor::matrix(rows, cols, data).expect("finite init"))
    }

    fn fill<T: Real>(rows: usize, cols: usize, v: f64) -> Param<T> {
        Arc::new(Tensor::matrix(rows, cols, vec![T::lit(v); rows * cols]).expect("finite init"))
    }

    fn linear<T: Real>(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Linear<Param<T>> {
        Linear {
            weight: self.normal(fan_in, fan_out, gain / (fan_in as f64).sqrt()),
            bias: Self::fill(1, fan_out, 0.0),
        }
    }

    fn norm<T: Real>(width: usize) -> Norm<Param<T>> {
        Norm {
            gain: Self::fill(1, width, 1.0),
            shift: Self::fill(1, width, 0.0),
        }
    }

    fn blocks<T: Real>(&mut self, width: usize, layers: usize, mlp_ratio: usize) -> Vec<Block<Param<T>>> {
        let residual_gain = 1.0 / (2.0 * layers as f64).sqrt();
        (0..layers)
            .map(|_| Block {
                norm1: Self::norm(width),
                query: self.linear(width, width, 1.0),
                key: self.linear(width, width, 1.0),
                value: self.linear(width, width, 1.0),
                out: self.linear(width, width, residual_gain),
                norm2: Self::norm(width),
                fc1: self.linear(width, width * mlp_ratio, 1.0),
                fc2: self.linear(width * mlp_ratio, width, residual_gain),
            })
            .collect()
    }
}

impl<T: Real> DualEncoderWeights<T> {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: &EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let vision = VisionTower {
            patch: init.linear(c.patch_dim(), c.vision_width, 1.0),
            class_embedding: init.normal(1, c.vision_width, 0.02),
            positions: init.normal(c.n_patches() + 1, c.vision_width, 0.02),
            norm_pre: Init::norm(c.vision_width),
            blocks: init.blocks(c.vision_width, c.vision_layers, c.mlp_ratio),
            norm_post: Init::norm(c.vision_width),
            projection: init.normal(c.vision_width, c.embed_dim, 1.0 / (c.vision_width as f64).sqrt()),
        };
        let text = TextTower {
            token_embedding: init.normal(vocab_size, c.text_width, 0.02),
            positions: init.normal(c.context_length, c.text_width, 0.01),
            blocks: init.blocks(c.text_width, c.text_layers, c.mlp_ratio),
            norm_final: Init::norm(c.text_width),
            projection: init.normal(c.text_width, c.embed_dim, 1.0 / (c.text_width as f64).sqrt()),
        };
        Ok(Self {
            config: config.clone(),
            vocab_size,
            towers: Towers {
                vision,
                text,
                log_logit_scale: Init::fill(1, 1, (1.0f64 / 0.07).ln()),
            },
        })
    }

    /// Expected shapes of every parameter in canonical order.
    pub fn param_shapes(config: &EncoderConfig, vocab_size: usize) -> Result<Vec<Vec<usize>>> {
        let probe = DualEncoderWeights::<T>::init(config, vocab_size, 0)?;
        Ok(probe.towers.params().iter().map(|p| p.shape().to_vec()).collect())
    }

    pub fn logit_scale(&self) -> f64 {
        self.towers.log_logit_scale.data()[0]
            .as_f64()
            .min(MAX_LOG_LOGIT_SCALE)
            .exp()
    }

    pub fn param_count(&self) -> usize {
        self.towers.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> DualEncoderWeights<U> {
        DualEncoderWeights {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            towers: self.towers.map(&mut |p| Arc::new(p.cast::<U>())),
        }
    }

    /// CRC-32 over the little-endian 32-bit encoding of every parameter.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.towers.params() {
            for v in p.data() {
                h.update(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::default();
        let a = DualEncoderWeights::<f32>::init(&cfg, 20, 3).unwrap();
        let b = DualEncoderWeights::<f32>::init(&cfg, 20, 3).unwrap();
        let c = DualEncoderWeights::<f32>::init(&cfg, 20, 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = EncoderConfig::default();
        let w = DualEncoderWeights::<f32>::init(&cfg, 20, 0).unwrap();
        assert_eq!(w.towers.vision.patch.weight.shape(), &[192, 64]);
        assert_eq!(w.towers.vision.positions.shape(), &[17, 64]);
        assert_eq!(w.towers.text.token_embedding.shape(), &[20, 64]);
        assert_eq!(w.towers.vision.blocks.len(), 4);
        assert!((w.logit_scale() - 1.0 / 0.07).abs() < 1e-3);
        let f64w = w.cast::<f64>();
        assert_eq!(f64w.checksum(), w.checksum());
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            patch_size: 5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let heads = EncoderConfig {
            vision_heads: 5,
            ..EncoderConfig::default()
        };
        assert!(heads.validate().is_err());
    }
}

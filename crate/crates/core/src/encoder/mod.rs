//! Frozen micro dual encoder with read-only prompt support.

mod checkpoint;
mod forward;
mod pretrain;
mod vocab;
mod weights;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use p2g_numerics::{AttentionMask, Tensor};

pub use checkpoint::{load_encoder, save_encoder, ENCODER_MAGIC, ENCODER_VERSION};
pub use forward::{
    encode_image, encode_text, image_prompt_outputs, image_trace, patchify, text_ids, text_prompt_outputs,
    text_trace, EncodeOutput, Trace,
};
pub(crate) use forward::{bind, prompt_path, text_view, vision_view};
pub use pretrain::{alignment_loss, pretrain_dual_encoder, Caption, PretrainConfig, PretrainReport};
pub use vocab::{tokenize, tokenize_reserved, Vocabulary, EOT, PAD, SOT};
pub use weights::{
    Block, DualEncoderWeights, EncoderConfig, Linear, Norm, Param, TextTower, Towers, VisionTower,
    MAX_LOG_LOGIT_SCALE,
};

use crate::error::{Error, Result};
use crate::image::Image;

/// Read-only mask over `[T·L prompt tokens, n_orig original tokens]`.
pub fn build_readonly_mask(n_orig: usize, tasks: usize, prompt_len: usize) -> Result<AttentionMask> {
    Ok(AttentionMask::read_only(n_orig, tasks, prompt_len, false)?)
}

/// Shared frozen encoder plus its vocabulary, with forward counters.
#[derive(Debug)]
pub struct DualEncoder {
    weights: Arc<DualEncoderWeights<f32>>,
    vocab: Arc<Vocabulary>,
    checksum: u32,
    image_forwards: AtomicUsize,
    text_forwards: AtomicUsize,
}

impl DualEncoder {
    pub fn new(weights: DualEncoderWeights<f32>, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() != weights.vocab_size {
            return Err(Error::InvalidVocabulary(format!(
                "{} tokens for an embedding table of {}",
                vocab.len(),
                weights.vocab_size
            )));
        }
        if vocab.context_length() != weights.config.context_length {
            return Err(Error::InvalidVocabulary(format!(
                "context length {} differs from the encoder's {}",
                vocab.context_length(),
                weights.config.context_length
            )));
        }
        Ok(Self {
            checksum: weights.checksum(),
            weights: Arc::new(weights),
            vocab: Arc::new(vocab),
            image_forwards: AtomicUsize::new(0),
            text_forwards: AtomicUsize::new(0),
        })
    }

    pub fn weights(&self) -> &DualEncoderWeights<f32> {
        &self.weights
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.weights.config
    }

    /// Checksum recorded when the encoder was frozen.
    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    /// Recomputes the checksum and compares it with the recorded one.
    pub fn verify(&self) -> Result<()> {
        if self.weights.checksum() != self.checksum {
            return Err(Error::ChecksumMismatch {
                what: "encoder",
                task: None,
            });
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &Image, groups: &[&Tensor]) -> Result<EncodeOutput> {
        self.image_forwards.fetch_add(1, Ordering::Relaxed);
        encode_image(&self.weights, image, groups)
    }

    pub fn encode_text(&self, text: &str, groups: &[&Tensor]) -> Result<EncodeOutput> {
        self.text_forwards.fetch_add(1, Ordering::Relaxed);
        encode_text(&self.weights, &self.vocab, text, groups)
    }

    /// Prompt-free image forward that also caches keys/values for the
    /// split prompt route. Counts as one image forward.
    pub fn image_trace(&self, image: &Image) -> Result<Trace> {
        self.image_forwards.fetch_add(1, Ordering::Relaxed);
        image_trace(&self.weights, image)
    }

    pub fn text_trace(&self, text: &str, reserved: usize) -> Result<Trace> {
        self.text_forwards.fetch_add(1, Ordering::Relaxed);
        text_trace(&self.weights, &self.vocab, text, reserved)
    }

    pub fn logit_scale(&self) -> f64 {
        self.weights.logit_scale()
    }

    pub fn image_forwards(&self) -> usize {
        self.image_forwards.load(Ordering::Relaxed)
    }

    pub fn text_forwards(&self) -> usize {
        self.text_forwards.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.image_forwards.store(0, Ordering::Relaxed);
        self.text_forwards.store(0, Ordering::Relaxed);
    }
}

//! Encoder checkpoint: `encoder.bin` plus `vocab.txt` in one directory.
//!
//! Layout of `encoder.bin`, all integers little-endian u32:
//! magic `P2G-ENC`, version, 13 architecture fields, vocab size, CRC-32 of
//! the payload, then every parameter as f32 in canonical order.

use std::path::Path;
use std::sync::Arc;

use p2g_numerics::Tensor;

use super::vocab::Vocabulary;
use super::weights::{DualEncoderWeights, EncoderConfig};
use super::DualEncoder;
use crate::error::{Error, Result};

pub const ENCODER_MAGIC: &[u8; 7] = b"P2G-ENC";
pub const ENCODER_VERSION: u32 = 1;
const WHAT: &str = "encoder checkpoint";
const N_FIELDS: usize = 13;

fn config_fields(c: &EncoderConfig) -> [u32; N_FIELDS] {
    [
        c.image_size,
        c.patch_size,
        c.vision_width,
        c.vision_layers,
        c.vision_heads,
        c.vision_context,
        c.text_width,
        c.text_layers,
        c.text_heads,
        c.context_length,
        c.embed_dim,
        c.mlp_ratio,
        c.causal_text as usize,
    ]
    .map(|v| v as u32)
}

fn config_from(f: &[u32]) -> EncoderConfig {
    let u = |i: usize| f[i] as usize;
    EncoderConfig {
        image_size: u(0),
        patch_size: u(1),
        vision_width: u(2),
        vision_layers: u(3),
        vision_heads: u(4),
        vision_context: u(5),
        text_width: u(6),
        text_layers: u(7),
        text_heads: u(8),
        context_length: u(9),
        embed_dim: u(10),
        mlp_ratio: u(11),
        causal_text: f[12] != 0,
    }
}

pub fn weights_to_bytes(w: &DualEncoderWeights<f32>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(w.param_count() * 4);
    for p in w.towers.params() {
        for v in p.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 64);
    out.extend_from_slice(ENCODER_MAGIC);
    out.extend_from_slice(&ENCODER_VERSION.to_le_bytes());
    for f in config_fields(&w.config) {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&(w.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<DualEncoderWeights<f32>> {
    let truncated = || Error::Truncated { what: WHAT };
    if bytes.len() < ENCODER_MAGIC.len() || &bytes[..ENCODER_MAGIC.len()] != ENCODER_MAGIC {
        return Err(Error::BadMagic { what: WHAT });
    }
    let mut words = bytes[ENCODER_MAGIC.len()..].chunks_exact(4);
    let mut next = || {
        words
            .next()
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .ok_or_else(truncated)
    };
    let version = next()?;
    if version != ENCODER_VERSION {
        return Err(Error::VersionMismatch { what: WHAT, found: version });
    }
    let mut fields = [0u32; N_FIELDS];
    for f in &mut fields {
        *f = next()?;
    }
    let vocab_size = next()? as usize;
    let crc = next()?;
    let header = ENCODER_MAGIC.len() + 4 * (N_FIELDS + 3);
    let payload = &bytes[header.min(bytes.len())..];
    let config = config_from(&fields);
    config.validate()?;
    let template = DualEncoderWeights::<f32>::init(&config, vocab_size, 0)?;
    if payload.len() != template.param_count() * 4 {
        return Err(truncated());
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::ChecksumMismatch { what: WHAT, task: None });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut failure = None;
    let towers = template.towers.map(&mut |p| {
        let data: Vec<f32> = floats.by_ref().take(p.len()).collect();
        match Tensor::new(p.shape().to_vec(), data) {
            Ok(t) => Arc::new(t),
            Err(e) => {
                failure.get_or_insert(e);
                Arc::clone(p)
            }
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(DualEncoderWeights {
        config,
        vocab_size,
        towers,
    })
}

pub fn save_encoder(encoder: &DualEncoder, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("encoder.bin");
    std::fs::write(&path, weights_to_bytes(encoder.weights())).map_err(|e| Error::io(&path, e))?;
    encoder.vocab().save(&dir.join("vocab.txt"))
}

/// Loads and re-verifies a checkpoint written by [`save_encoder`].
pub fn load_encoder(dir: &Path) -> Result<DualEncoder> {
    let path = dir.join("encoder.bin");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let weights = weights_from_bytes(&bytes)?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"), weights.config.context_length)?;
    DualEncoder::new(weights, vocab)
}

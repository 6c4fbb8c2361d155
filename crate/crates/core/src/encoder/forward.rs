//! Transformer forward passes over bound parameter trees.
//!
//! Two routes compute prompt outputs. The full route runs the whole
//! `[prompts…, originals…]` sequence under the read-only mask. The split route
//! first traces the prompt-free originals once, caching each layer's keys and
//! values, and then runs only the prompt rows against those cached keys. The
//! read-only mask makes the two routes agree, and the split route is what the
//! trainer differentiates through.

use std::sync::Arc;

use p2g_numerics::{AttentionMask, Graph, NodeId, Real, Tensor};

use super::vocab::{tokenize_reserved, Vocabulary};
use super::weights::{Block, DualEncoderWeights, EncoderConfig, Linear, Norm, Param, Towers};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

const LN_EPS: f64 = 1e-5;

/// Output of one encoder forward.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput<T: Real = f32> {
    /// Unit-norm joint-space feature (CLS for images, EOT for text).
    pub joint_feature: Vec<T>,
    /// One `[L × D]` projected block per prompt group, in input order.
    pub prompt_outputs: Vec<Tensor<T>>,
}

/// Prompt-free forward of the original tokens with cached per-layer keys and
/// values, enough to run prompt rows later without recomputing originals.
#[derive(Debug, Clone)]
pub struct Trace<T: Real = f32> {
    pub joint_feature: Vec<T>,
    kv: Vec<(Arc<Tensor<T>>, Arc<Tensor<T>>)>,
    n_orig: usize,
}

impl<T: Real> Trace<T> {
    pub fn n_orig(&self) -> usize {
        self.n_orig
    }
}

pub(crate) fn bind<T: Real>(g: &mut Graph<T>, towers: &Towers<Param<T>>, trainable: bool) -> Towers<NodeId> {
    towers.map(&mut |p| {
        if trainable {
            g.leaf_shared(Arc::clone(p))
        } else {
            g.constant_shared(Arc::clone(p))
        }
    })
}

/// The parts of a tower shared by both modalities.
#[derive(Clone, Copy)]
pub(crate) struct TowerView<'a> {
    pre: Option<&'a Norm<NodeId>>,
    blocks: &'a [Block<NodeId>],
    post: &'a Norm<NodeId>,
    projection: NodeId,
    heads: usize,
    causal: bool,
}

pub(crate) fn vision_view<'a>(t: &'a Towers<NodeId>, cfg: &EncoderConfig) -> TowerView<'a> {
    TowerView {
        pre: Some(&t.vision.norm_pre),
        blocks: &t.vision.blocks,
        post: &t.vision.norm_post,
        projection: t.vision.projection,
        heads: cfg.vision_heads,
        causal: false,
    }
}

pub(crate) fn text_view<'a>(t: &'a Towers<NodeId>, cfg: &EncoderConfig) -> TowerView<'a> {
    TowerView {
        pre: None,
        blocks: &t.text.blocks,
        post: &t.text.norm_final,
        projection: t.text.projection,
        heads: cfg.text_heads,
        causal: cfg.causal_text,
    }
}

fn linear<T: Real>(g: &mut Graph<T>, x: NodeId, l: &Linear<NodeId>) -> Result<NodeId> {
    let y = g.matmul(x, l.weight)?;
    Ok(g.add_row(y, l.bias)?)
}

fn norm<T: Real>(g: &mut Graph<T>, x: NodeId, n: &Norm<NodeId>) -> Result<NodeId> {
    Ok(g.layer_norm(x, n.gain, n.shift, LN_EPS)?)
}

/// Pre-LN block. `cached` holds keys/values appended after the block's own
/// (the split route). Returns the block output and this block's own keys and
/// values.
fn block<T: Real>(
    g: &mut Graph<T>,
    b: &Block<NodeId>,
    x: NodeId,
    heads: usize,
    mask: &AttentionMask,
    cached: Option<(NodeId, NodeId)>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let h = norm(g, x, &b.norm1)?;
    let q = linear(g, h, &b.query)?;
    let k = linear(g, h, &b.key)?;
    let v = linear(g, h, &b.value)?;
    let (kk, vv) = match cached {
        Some((ck, cv)) => (g.concat_rows(&[k, ck])?, g.concat_rows(&[v, cv])?),
        None => (k, v),
    };
    let a = g.attention(q, kk, vv, heads, mask)?;
    let a = linear(g, a, &b.out)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, &b.norm2)?;
    let h = linear(g, h, &b.fc1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, &b.fc2)?;
    Ok((g.add(x, h)?, k, v))
}

pub(crate) struct TowerOut {
    /// Projected, not yet normalized, summary row `[1 × D]`.
    pub summary: NodeId,
    /// Projected prompt outputs, one `[L × D]` node per group.
    pub prompts: Vec<NodeId>,
    kv: Vec<(NodeId, NodeId)>,
}

/// Full masked-sequence forward. `orig` holds the embedded original tokens
/// (positions included); `summary_row` indexes into them.
pub(crate) fn tower_forward<T: Real>(
    g: &mut Graph<T>,
    view: TowerView<'_>,
    orig: NodeId,
    prompts: &[NodeId],
    summary_row: usize,
) -> Result<TowerOut> {
    let n_orig = g.value(orig).rows();
    let group_len = match prompts.first() {
        Some(p) => g.value(*p).rows(),
        None => 0,
    };
    if let Some(bad) = prompts.iter().find(|p| g.value(**p).rows() != group_len) {
        return Err(Error::Shape(format!(
            "prompt groups must share one length: {group_len} vs {}",
            g.value(*bad).rows()
        )));
    }
    let n_prompt = prompts.len() * group_len;
    let mask = AttentionMask::read_only(n_orig, prompts.len(), group_len, view.causal)?;
    let mut x = if prompts.is_empty() {
        orig
    } else {
        let mut parts = prompts.to_vec();
        parts.push(orig);
        g.concat_rows(&parts)?
    };
    if let Some(pre) = view.pre {
        x = norm(g, x, pre)?;
    }
    let mut kv = Vec::with_capacity(view.blocks.len());
    for b in view.blocks {
        let (y, k, v) = block(g, b, x, view.heads, &mask, None)?;
        kv.push((k, v));
        x = y;
    }
    let x = norm(g, x, view.post)?;
    let row = g.slice_rows(x, n_prompt + summary_row, 1)?;
    let summary = g.matmul(row, view.projection)?;
    let mut outs = Vec::with_capacity(prompts.len());
    if n_prompt > 0 {
        let p = g.slice_rows(x, 0, n_prompt)?;
        let p = g.matmul(p, view.projection)?;
        for k in 0..prompts.len() {
            outs.push(g.slice_rows(p, k * group_len, group_len)?);
        }
    }
    Ok(TowerOut {
        summary,
        prompts: outs,
        kv,
    })
}

/// Split-route forward of one prompt group against a cached trace.
pub(crate) fn prompt_path<T: Real>(
    g: &mut Graph<T>,
    view: TowerView<'_>,
    trace: &Trace<T>,
    prompts: NodeId,
) -> Result<NodeId> {
    let l = g.value(prompts).rows();
    let mask = AttentionMask::read_only(trace.n_orig, 1, l, view.causal)?.query_rows(0, l)?;
    let mut x = prompts;
    if let Some(pre) = view.pre {
        x = norm(g, x, pre)?;
    }
    for (b, (k, v)) in view.blocks.iter().zip(&trace.kv) {
        let ck = g.constant_shared(Arc::clone(k));
        let cv = g.constant_shared(Arc::clone(v));
        x = block(g, b, x, view.heads, &mask, Some((ck, cv)))?.0;
    }
    let x = norm(g, x, view.post)?;
    Ok(g.matmul(x, view.projection)?)
}

/// `[n_patches × patch²·3]`, pixels mapped from `[0,1]` to `[-1,1]`.
pub fn patchify<T: Real>(cfg: &EncoderConfig, image: &Image) -> Result<Tensor<T>> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Shape(format!(
            "image is {}x{}, encoder expects {}x{}",
            image.height(),
            image.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let mut data = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..CHANNELS {
                        let v = image.get(py * p + y, px * p + x, c) as f64;
                        data.push(T::lit((v - 0.5) * 2.0));
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(cfg.n_patches(), cfg.patch_dim(), data)?)
}

/// `[CLS, patches…]` plus positional embeddings.
pub(crate) fn embed_image<T: Real>(g: &mut Graph<T>, t: &Towers<NodeId>, patches: Tensor<T>) -> Result<NodeId> {
    let x = g.constant(patches);
    let x = linear(g, x, &t.vision.patch)?;
    let x = g.concat_rows(&[t.vision.class_embedding, x])?;
    Ok(g.add(x, t.vision.positions)?)
}

pub(crate) fn embed_text<T: Real>(g: &mut Graph<T>, t: &Towers<NodeId>, ids: &[usize]) -> Result<NodeId> {
    let x = g.gather_rows(t.text.token_embedding, ids)?;
    let pos = g.slice_rows(t.text.positions, 0, ids.len())?;
    Ok(g.add(x, pos)?)
}

/// Token ids with padding removed: `[SOT, words…, EOT]`.
pub fn text_ids(vocab: &Vocabulary, text: &str, reserved: usize) -> Result<Vec<usize>> {
    let mut ids = tokenize_reserved(text, vocab, reserved)?;
    let end = ids.iter().position(|&i| i == vocab.eot_id()).map_or(ids.len(), |p| p + 1);
    ids.truncate(end);
    Ok(ids)
}

fn check_groups<T: Real>(groups: &[&Tensor<T>], width: usize) -> Result<usize> {
    let l = groups.first().map_or(0, |p| p.rows());
    for p in groups {
        if p.shape().len() != 2 || p.cols() != width || p.rows() != l || l == 0 {
            return Err(Error::Shape(format!(
                "prompt group {:?} does not match [{l} × {width}]",
                p.shape()
            )));
        }
    }
    Ok(l)
}

fn check_vision_context(cfg: &EncoderConfig, n_prompt: usize) -> Result<()> {
    let needed = n_prompt + cfg.n_patches() + 1;
    if needed > cfg.vision_context {
        return Err(Error::TokenLengthExceeded {
            needed,
            limit: cfg.vision_context,
        });
    }
    Ok(())
}

fn finish<T: Real>(g: &mut Graph<T>, out: &TowerOut) -> Result<EncodeOutput<T>> {
    let f = g.normalize_rows(out.summary)?;
    Ok(EncodeOutput {
        joint_feature: g.value(f).data().to_vec(),
        prompt_outputs: out.prompts.iter().map(|p| g.value(*p).clone()).collect(),
    })
}

pub fn encode_image<T: Real>(
    w: &DualEncoderWeights<T>,
    image: &Image,
    groups: &[&Tensor<T>],
) -> Result<EncodeOutput<T>> {
    let cfg = &w.config;
    let l = check_groups(groups, cfg.vision_width)?;
    check_vision_context(cfg, groups.len() * l)?;
    let patches = patchify(cfg, image)?;
    let mut g = Graph::new();
    let t = bind(&mut g, &w.towers, false);
    let orig = embed_image(&mut g, &t, patches)?;
    let prompts: Vec<NodeId> = groups.iter().map(|p| g.constant((*p).clone())).collect();
    let out = tower_forward(&mut g, vision_view(&t, cfg), orig, &prompts, 0)?;
    finish(&mut g, &out)
}

pub fn encode_text<T: Real>(
    w: &DualEncoderWeights<T>,
    vocab: &Vocabulary,
    text: &str,
    groups: &[&Tensor<T>],
) -> Result<EncodeOutput<T>> {
    let cfg = &w.config;
    let l = check_groups(groups, cfg.text_width)?;
    let ids = text_ids(vocab, text, groups.len() * l)?;
    let mut g = Graph::new();
    let t = bind(&mut g, &w.towers, false);
    let orig = embed_text(&mut g, &t, &ids)?;
    let prompts: Vec<NodeId> = groups.iter().map(|p| g.constant((*p).clone())).collect();
    let out = tower_forward(&mut g, text_view(&t, cfg), orig, &prompts, ids.len() - 1)?;
    finish(&mut g, &out)
}

fn trace_of<T: Real>(g: &mut Graph<T>, out: TowerOut, n_orig: usize) -> Result<Trace<T>> {
    let f = g.normalize_rows(out.summary)?;
    Ok(Trace {
        joint_feature: g.value(f).data().to_vec(),
        kv: out
            .kv
            .iter()
            .map(|(k, v)| (g.shared_value(*k), g.shared_value(*v)))
            .collect(),
        n_orig,
    })
}

pub fn image_trace<T: Real>(w: &DualEncoderWeights<T>, image: &Image) -> Result<Trace<T>> {
    let cfg = &w.config;
    let patches = patchify(cfg, image)?;
    let mut g = Graph::new();
    let t = bind(&mut g, &w.towers, false);
    let orig = embed_image(&mut g, &t, patches)?;
    let out = tower_forward(&mut g, vision_view(&t, cfg), orig, &[], 0)?;
    trace_of(&mut g, out, cfg.n_patches() + 1)
}

/// `reserved` prompt slots must fit alongside the text.
pub fn text_trace<T: Real>(
    w: &DualEncoderWeights<T>,
    vocab: &Vocabulary,
    text: &str,
    reserved: usize,
) -> Result<Trace<T>> {
    let ids = text_ids(vocab, text, reserved)?;
    let mut g = Graph::new();
    let t = bind(&mut g, &w.towers, false);
    let orig = embed_text(&mut g, &t, &ids)?;
    let out = tower_forward(&mut g, text_view(&t, &w.config), orig, &[], ids.len() - 1)?;
    trace_of(&mut g, out, ids.len())
}

/// Split-route prompt outputs for an image, without gradients.
pub fn image_prompt_outputs<T: Real>(
    w: &DualEncoderWeights<T>,
    trace: &Trace<T>,
    prompts: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_groups(&[prompts], w.config.vision_width)?;
    check_vision_context(&w.config, prompts.rows())?;
    let mut g = Graph::new();
    let t = bind(&mut g, &w.towers, false);
    let p = g.constant(prompts.clone());
    let out = prompt_path(&mut g, vision_view(&t, &w.config), trace, p)?;
    Ok(g.value(out).clone())
}

/// Split-route prompt outputs for a text, without gradients.
pub fn text_prompt_outputs<T: Real>(
    w: &DualEncoderWeights<T>,
    trace: &Trace<T>,
    prompts: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_groups(&[prompts], w.config.text_width)?;
    let needed = trace.n_orig + prompts.rows();
    if needed > w.config.context_length {
        return Err(Error::TokenLengthExceeded {
            needed,
            limit: w.config.context_length,
        });
    }
    let mut g = Graph::new();
    let t = bind(&mut g, &w.towers, false);
    let p = g.constant(prompts.clone());
    let out = prompt_path(&mut g, text_view(&t, &w.config), trace, p)?;
    Ok(g.value(out).clone())
}

//! Per-task optimization of read-only prompts on the frozen encoder.

mod augment;
mod loss;
mod schedule;

use std::collections::HashMap;

use p2g_numerics::{Graph, NodeId, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, flip_horizontal, AugmentConfig};
pub use loss::{averaged_similarity, cce_from_scores, contrastive_cce_loss, PromptTriple};
pub(crate) use loss::{graph_batch_loss, graph_mean_similarity};
pub use schedule::cosine_with_warmup;

use crate::conditioning::{build_conditioned_prompts, ClassSet, ConditionedPrompts, ZeroShotClassifier};
use crate::data::{splitmix64, SampleRecord};
use crate::encoder::{bind, prompt_path, text_view, vision_view, DualEncoder, DualEncoderWeights, Trace, Towers};
use crate::error::{Error, Result};
use crate::prompt_bank::{init_task_prompts, PromptBank, TaskPrompts};
use crate::Label;

/// Source of the similarity scale σ inside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitScale {
    /// The encoder's learned, frozen scale.
    Encoder,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_per_task: usize,
    pub warmup_epochs: usize,
    pub prompt_len: usize,
    pub top_c: usize,
    pub batch_size: usize,
    pub logit_scale: LogitScale,
    /// Insert the zero-shot class into the real/fake templates.
    pub conditioning: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs_per_task: 20,
            warmup_epochs: 1,
            prompt_len: 7,
            top_c: 5,
            batch_size: 32,
            logit_scale: LogitScale::Encoder,
            conditioning: true,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.epochs_per_task > 0 && self.warmup_epochs >= self.epochs_per_task {
            return bad(format!(
                "warmup_epochs {} must be below epochs_per_task {}",
                self.warmup_epochs, self.epochs_per_task
            ));
        }
        if self.top_c == 0 || self.prompt_len == 0 || self.batch_size == 0 {
            return bad("top_c, prompt_len and batch_size must be positive".into());
        }
        if let LogitScale::Fixed(s) = self.logit_scale {
            if s.is_nan() || s <= 0.0 {
                return bad(format!("fixed logit scale {s} must be positive"));
            }
        }
        Ok(())
    }

    pub fn sigma(&self, encoder: &DualEncoder) -> f64 {
        match self.logit_scale {
            LogitScale::Encoder => encoder.logit_scale(),
            LogitScale::Fixed(s) => s,
        }
    }

    /// Learning rate at `step` of `total`, with the warm-up taking the
    /// configured share of epochs.
    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        let warmup = if self.epochs_per_task == 0 {
            0
        } else {
            total * self.warmup_epochs / self.epochs_per_task
        };
        cosine_with_warmup(step, total, warmup, self.lr)
    }
}

/// Learning rate at `global_step` of `total_steps`.
pub fn lr_at(global_step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    config.lr_at(global_step, total_steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task_id: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub prompts: TaskPrompts,
    pub epochs: Vec<EpochLog>,
}

/// The texts a training or inference step compares against.
pub fn texts_for(classes: &[String], conditioning: bool) -> Result<ConditionedPrompts> {
    if conditioning {
        build_conditioned_prompts(classes)
    } else {
        Ok(ConditionedPrompts::unconditioned())
    }
}

/// One sample of a loss graph: the image trace, indices of its real and fake
/// texts, and its label.
pub(crate) struct LossItem<'a, T: Real> {
    pub image: &'a Trace<T>,
    pub real: Vec<usize>,
    pub fake: Vec<usize>,
    pub label: Label,
}

/// Builds the mean loss over `items` with `p_v` and `p_t` as graph leaves.
pub(crate) fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    w: &DualEncoderWeights<T>,
    t: &Towers<NodeId>,
    pv: NodeId,
    pt: NodeId,
    texts: &[&Trace<T>],
    items: &[LossItem<'_, T>],
    sigma: f64,
) -> Result<NodeId> {
    let tv = text_view(t, &w.config);
    let vv = vision_view(t, &w.config);
    let text_units = texts
        .iter()
        .map(|tr| {
            let o = prompt_path(g, tv, tr, pt)?;
            Ok(g.normalize_rows(o)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(items.len());
    for it in items {
        let v = prompt_path(g, vv, it.image, pv)?;
        let v = g.normalize_rows(v)?;
        let r: Vec<NodeId> = it.real.iter().map(|&i| text_units[i]).collect();
        let f: Vec<NodeId> = it.fake.iter().map(|&i| text_units[i]).collect();
        let s_r = graph_mean_similarity(g, v, &r)?;
        let s_f = graph_mean_similarity(g, v, &f)?;
        pairs.push((s_r, s_f));
    }
    let labels: Vec<Label> = items.iter().map(|i| i.label).collect();
    graph_batch_loss(g, &pairs, &labels, sigma)
}

/// Loss of one sample and its gradients with respect to `p_v` and `p_t`,
/// computed through the split prompt route.
#[allow(clippy::too_many_arguments)]
pub fn prompt_loss_and_grads<T: Real>(
    w: &DualEncoderWeights<T>,
    image: &Trace<T>,
    real: &[Trace<T>],
    fake: &[Trace<T>],
    p_v: &Tensor<T>,
    p_t: &Tensor<T>,
    label: Label,
    sigma: f64,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let t = bind(&mut g, &w.towers, false);
    let pv = g.leaf(p_v.clone());
    let pt = g.leaf(p_t.clone());
    let texts: Vec<&Trace<T>> = real.iter().chain(fake).collect();
    let item = LossItem {
        image,
        real: (0..real.len()).collect(),
        fake: (real.len()..real.len() + fake.len()).collect(),
        label,
    };
    let loss = loss_graph(&mut g, w, &t, pv, pt, &texts, &[item], sigma)?;
    let mut grads = g.backward(loss, &[pv, pt])?;
    let gt = grads.pop().expect("two leaves");
    let gv = grads.pop().expect("two leaves");
    Ok((g.value(loss).data()[0], gv, gt))
}

/// Caches prompt-free text traces; they do not depend on the prompts.
struct TextCache<'e> {
    encoder: &'e DualEncoder,
    reserved: usize,
    index: HashMap<String, usize>,
    traces: Vec<Trace>,
}

impl<'e> TextCache<'e> {
    fn new(encoder: &'e DualEncoder, reserved: usize) -> Self {
        Self {
            encoder,
            reserved,
            index: HashMap::new(),
            traces: Vec::new(),
        }
    }

    fn id(&mut self, text: &str) -> Result<usize> {
        if let Some(&i) = self.index.get(text) {
            return Ok(i);
        }
        let tr = self.encoder.text_trace(text, self.reserved)?;
        self.traces.push(tr);
        self.index.insert(text.to_string(), self.traces.len() - 1);
        Ok(self.traces.len() - 1)
    }
}

/// Trains the prompts of task `bank.len() + 1` on `dataset`. Only the new
/// task's prompts are optimized; the encoder and the bank are read-only.
pub fn train_task(
    dataset: &[SampleRecord],
    bank: &PromptBank,
    encoder: &DualEncoder,
    class_set: &ClassSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let task_id = bank.len() + 1;
    let (l, d_v, d_t) = bank.dims();
    let enc_cfg = encoder.config();
    if l != config.prompt_len || d_v != enc_cfg.vision_width || d_t != enc_cfg.text_width {
        return Err(Error::Shape(format!(
            "bank dims ({l}, {d_v}, {d_t}) do not match prompt_len {} and encoder widths ({}, {})",
            config.prompt_len, enc_cfg.vision_width, enc_cfg.text_width
        )));
    }
    let has = |lab| dataset.iter().any(|r| r.label == lab);
    if !(has(Label::Real) && has(Label::Fake)) {
        return Err(Error::Dataset(format!("task {task_id} training set needs both labels")));
    }
    if config.conditioning && config.top_c > class_set.len() {
        return Err(Error::TopCOutOfRange {
            c: config.top_c,
            n: class_set.len(),
        });
    }
    bank.verify()?;
    encoder.verify()?;
    let bank_sums = bank.checksums().to_vec();

    let task_seed = splitmix64(config.seed ^ (task_id as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    let mut prompts = init_task_prompts(task_id, l, d_v, d_t, task_seed)?;
    let sigma = config.sigma(encoder);
    let zero_shot = if config.conditioning {
        Some(ZeroShotClassifier::new(encoder, class_set)?)
    } else {
        None
    };
    let mut texts = TextCache::new(encoder, l);
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs_per_task;
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed ^ 0x0bad_5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs_per_task);
    let mut step = 0;

    for epoch in 0..config.epochs_per_task {
        order.shuffle(&mut rng);
        let epoch_lr = config.lr_at(step, total)?;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let views: Vec<(usize, u64)> = chunk
                .iter()
                .map(|&i| (i, splitmix64(task_seed ^ ((step as u64) << 24) ^ i as u64)))
                .collect();
            let traces = views
                .par_iter()
                .map(|&(i, seed)| encoder.image_trace(&augment(&dataset[i].image, &config.augment, seed)))
                .collect::<Result<Vec<_>>>()?;

            let mut items = Vec::with_capacity(chunk.len());
            for (&i, trace) in chunk.iter().zip(&traces) {
                let classes = match &zero_shot {
                    Some(z) => z.top_c(&trace.joint_feature, config.top_c)?,
                    None => Vec::new(),
                };
                let cp = texts_for(&classes, config.conditioning)?;
                let real = cp.real_texts.iter().map(|s| texts.id(s)).collect::<Result<_>>()?;
                let fake = cp.fake_texts.iter().map(|s| texts.id(s)).collect::<Result<_>>()?;
                items.push(LossItem {
                    image: trace,
                    real,
                    fake,
                    label: dataset[i].label,
                });
            }

            let w = encoder.weights();
            let mut g = Graph::new();
            let t = bind(&mut g, &w.towers, false);
            let pv = g.leaf(prompts.p_v().clone());
            let pt = g.leaf(prompts.p_t().clone());
            let text_refs: Vec<&Trace> = texts.traces.iter().collect();
            let loss = loss_graph(&mut g, w, &t, pv, pt, &text_refs, &items, sigma)?;
            loss_sum += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            let grads = g.backward(loss, &[pv, pt])?;

            let lr = config.lr_at(step, total)? as f32;
            let sgd = |p: &Tensor, gr: &Tensor| -> Result<Tensor> {
                let data = p.data().iter().zip(gr.data()).map(|(x, d)| x - lr * d).collect();
                Ok(Tensor::new(p.shape().to_vec(), data)?)
            };
            let new_v = sgd(prompts.p_v(), &grads[0])?;
            let new_t = sgd(prompts.p_t(), &grads[1])?;
            prompts.update(new_v, new_t)?;
            step += 1;
        }
        let log = EpochLog {
            task_id,
            epoch: epoch + 1,
            mean_loss: loss_sum / dataset.len() as f64,
            lr: epoch_lr,
        };
        on_epoch(&log);
        epochs.push(log);
    }

    encoder.verify()?;
    if bank.checksums() != bank_sums.as_slice() {
        return Err(Error::ChecksumMismatch {
            what: "prompt bank",
            task: None,
        });
    }
    bank.verify()?;
    prompts.mark_trained();
    Ok(TrainOutcome { prompts, epochs })
}

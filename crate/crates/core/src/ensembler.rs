//! Scoring across every seen domain in one forward, posterior weighting and
//! the max/mean decision rule.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use p2g_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ClassSet, ZeroShotClassifier};
use crate::domain::{domain_posterior, DomainCentroidBank, DomainPosterior};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt_bank::PromptBank;
use crate::trainer::{averaged_similarity, texts_for};
use crate::Label;

/// Per-task real and fake scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub s_r: Vec<f64>,
    pub s_f: Vec<f64>,
}

fn max_of(s: &[f64]) -> f64 {
    s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn mean_of(s: &[f64]) -> f64 {
    s.iter().sum::<f64>() / s.len() as f64
}

impl ScorePair {
    pub fn new(s_r: Vec<f64>, s_f: Vec<f64>) -> Result<Self> {
        if s_r.is_empty() || s_r.len() != s_f.len() {
            return Err(Error::Shape(format!("score vectors of length {} and {}", s_r.len(), s_f.len())));
        }
        if s_r.iter().chain(&s_f).any(|v| !v.is_finite()) {
            return Err(Error::Numerics(p2g_numerics::NumericsError::NonFinite { op: "scores" }));
        }
        Ok(Self { s_r, s_f })
    }

    pub fn tasks(&self) -> usize {
        self.s_r.len()
    }

    pub fn s_r_star(&self) -> f64 {
        max_of(&self.s_r)
    }

    pub fn s_f_star(&self) -> f64 {
        max_of(&self.s_f)
    }

    pub fn s_r_bar(&self) -> f64 {
        mean_of(&self.s_r)
    }

    pub fn s_f_bar(&self) -> f64 {
        mean_of(&self.s_f)
    }

    pub fn weighted(&self, w: &DomainPosterior) -> Result<Self> {
        Self::new(weight_scores(&self.s_r, w)?, weight_scores(&self.s_f, w)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Max,
    Mean,
    /// Hard selection of a single task.
    Selected,
}

/// Aggregation rule over the task scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleRule {
    Mean,
    Max,
    #[default]
    MaxMean,
}

impl EnsembleRule {
    pub const ALL: [EnsembleRule; 3] = [EnsembleRule::Mean, EnsembleRule::Max, EnsembleRule::MaxMean];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleRule::Mean => "mean",
            EnsembleRule::Max => "max",
            EnsembleRule::MaxMean => "max-mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub y_hat: Label,
    pub branch: Branch,
    pub scores: ScorePair,
}

/// Real only when its score is strictly larger.
fn pick(real: f64, fake: f64) -> Label {
    if real > fake {
        Label::Real
    } else {
        Label::Fake
    }
}

/// Max branch when `|s_r* − s_f*| ≥ |s̄_r − s̄_f|`, mean branch otherwise.
pub fn decide(pair: &ScorePair) -> Decision {
    decide_with(pair, EnsembleRule::MaxMean)
}

pub fn decide_with(pair: &ScorePair, rule: EnsembleRule) -> Decision {
    let (rs, fs) = (pair.s_r_star(), pair.s_f_star());
    let (rb, fb) = (pair.s_r_bar(), pair.s_f_bar());
    let branch = match rule {
        EnsembleRule::Max => Branch::Max,
        EnsembleRule::Mean => Branch::Mean,
        EnsembleRule::MaxMean if (rs - fs).abs() >= (rb - fb).abs() => Branch::Max,
        EnsembleRule::MaxMean => Branch::Mean,
    };
    let y_hat = match branch {
        Branch::Max => pick(rs, fs),
        _ => pick(rb, fb),
    };
    Decision {
        y_hat,
        branch,
        scores: pair.clone(),
    }
}

pub fn weight_scores(s: &[f64], w: &DomainPosterior) -> Result<Vec<f64>> {
    if s.len() != w.w.len() {
        return Err(Error::Shape(format!("{} scores for {} posterior entries", s.len(), w.w.len())));
    }
    Ok(s.iter().zip(&w.w).map(|(a, b)| a * b).collect())
}

/// Scores of the most likely task only, unweighted.
pub fn hard_select_baseline(s_r: &[f64], s_f: &[f64], w: &DomainPosterior) -> Result<Decision> {
    let pair = ScorePair::new(s_r.to_vec(), s_f.to_vec())?;
    if w.w.len() != pair.tasks() {
        return Err(Error::Shape(format!("{} tasks for {} posterior entries", pair.tasks(), w.w.len())));
    }
    let k = w.argmax();
    Ok(Decision {
        y_hat: pick(s_r[k], s_f[k]),
        branch: Branch::Selected,
        scores: pair,
    })
}

/// `s_r[k]` is the mean over the `c` real texts of the row-averaged cosine
/// similarity between `v[k]` and `r[k][j]`; likewise `s_f`.
pub fn task_scores(v: &[Tensor], r: &[Vec<Tensor>], f: &[Vec<Tensor>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.is_empty() || r.len() != v.len() || f.len() != v.len() {
        return Err(Error::Shape(format!(
            "{} visual, {} real and {} fake task outputs",
            v.len(),
            r.len(),
            f.len()
        )));
    }
    let c = r[0].len();
    if c == 0 || r.iter().chain(f).any(|x| x.len() != c) {
        return Err(Error::Shape("every task needs the same positive number of texts".into()));
    }
    let mean_sim = |vk: &Tensor, texts: &[Tensor]| -> Result<f64> {
        let mut s = 0.0;
        for t in texts {
            s += averaged_similarity(vk, t)? as f64;
        }
        Ok(s / texts.len() as f64)
    };
    let mut s_r = Vec::with_capacity(v.len());
    let mut s_f = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        s_r.push(mean_sim(&v[k], &r[k])?);
        s_f.push(mean_sim(&v[k], &f[k])?);
    }
    Ok((s_r, s_f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub top_c: usize,
    pub conditioning: bool,
    pub rule: EnsembleRule,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_c: 5,
            conditioning: true,
            rule: EnsembleRule::MaxMean,
        }
    }
}

/// Everything inference produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub decision: Decision,
    /// Unweighted per-task scores.
    pub raw: ScorePair,
    pub posterior: DomainPosterior,
    pub classes: Vec<String>,
}

/// Per-task text outputs keyed by text.
type TextOutputs = Arc<Vec<Tensor>>;

/// Inference state for a fixed encoder and banks. Text outputs are cached
/// across images since they do not depend on the image.
pub struct Detector<'a> {
    encoder: &'a DualEncoder,
    bank: &'a PromptBank,
    centroids: &'a DomainCentroidBank,
    zero_shot: Option<ZeroShotClassifier>,
    config: InferenceConfig,
    texts: Mutex<HashMap<String, TextOutputs>>,
}

impl<'a> Detector<'a> {
    pub fn new(
        encoder: &'a DualEncoder,
        bank: &'a PromptBank,
        centroids: &'a DomainCentroidBank,
        class_set: &ClassSet,
        config: &InferenceConfig,
    ) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        if centroids.len() != bank.len() {
            return Err(Error::Shape(format!(
                "{} prompt tasks but {} centroid tasks",
                bank.len(),
                centroids.len()
            )));
        }
        if config.conditioning && (config.top_c == 0 || config.top_c > class_set.len()) {
            return Err(Error::TopCOutOfRange {
                c: config.top_c,
                n: class_set.len(),
            });
        }
        let zero_shot = if config.conditioning {
            Some(ZeroShotClassifier::new(encoder, class_set)?)
        } else {
            None
        };
        Ok(Self {
            encoder,
            bank,
            centroids,
            zero_shot,
            config: config.clone(),
            texts: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    fn classes(&self, feature: &[f32]) -> Result<Vec<String>> {
        match &self.zero_shot {
            Some(z) => z.top_c(feature, self.config.top_c),
            None => Ok(Vec::new()),
        }
    }

    fn text_outputs(&self, text: &str) -> Result<TextOutputs> {
        if let Some(t) = self.texts.lock().expect("text cache").get(text) {
            return Ok(t.clone());
        }
        let out = Arc::new(self.encoder.encode_text(text, &self.bank.text_prompts())?.prompt_outputs);
        self.texts
            .lock()
            .expect("text cache")
            .insert(text.to_string(), out.clone());
        Ok(out)
    }

    fn per_task(&self, texts: &[String], t: usize) -> Result<Vec<Vec<Tensor>>> {
        let outs = texts.iter().map(|s| self.text_outputs(s)).collect::<Result<Vec<_>>>()?;
        Ok((0..t).map(|k| outs.iter().map(|o| o[k].clone()).collect()).collect())
    }

    fn finish(&self, v: &[Tensor], feature: &[f32]) -> Result<Detection> {
        let classes = self.classes(feature)?;
        let texts = texts_for(&classes, self.config.conditioning)?;
        let t = self.bank.len();
        let r = self.per_task(&texts.real_texts, t)?;
        let f = self.per_task(&texts.fake_texts, t)?;
        let (s_r, s_f) = task_scores(v, &r, &f)?;
        let raw = ScorePair::new(s_r, s_f)?;
        let feature64: Vec<f64> = feature.iter().map(|&x| x as f64).collect();
        let posterior = domain_posterior(&feature64, self.centroids)?;
        let decision = decide_with(&raw.weighted(&posterior)?, self.config.rule);
        Ok(Detection {
            decision,
            raw,
            posterior,
            classes,
        })
    }

    /// One image forward carrying every task's visual prompts.
    pub fn classify(&self, image: &Image) -> Result<Detection> {
        let out = self.encoder.encode_image(image, &self.bank.visual_prompts())?;
        self.finish(&out.prompt_outputs, &out.joint_feature)
    }

    /// Reference path: one image forward per task, each with only that
    /// task's prompts. Texts are encoded per task too.
    pub fn classify_looped(&self, image: &Image) -> Result<Detection> {
        let mut v = Vec::with_capacity(self.bank.len());
        let mut feature = Vec::new();
        for p in self.bank.visual_prompts() {
            let out = self.encoder.encode_image(image, &[p])?;
            feature = out.joint_feature;
            v.extend(out.prompt_outputs);
        }
        let classes = self.classes(&feature)?;
        let texts = texts_for(&classes, self.config.conditioning)?;
        let single = |list: &[String]| -> Result<Vec<Vec<Tensor>>> {
            self.bank
                .text_prompts()
                .into_iter()
                .map(|p| {
                    list.iter()
                        .map(|s| Ok(self.encoder.encode_text(s, &[p])?.prompt_outputs.remove(0)))
                        .collect()
                })
                .collect()
        };
        let (s_r, s_f) = task_scores(&v, &single(&texts.real_texts)?, &single(&texts.fake_texts)?)?;
        let raw = ScorePair::new(s_r, s_f)?;
        let feature64: Vec<f64> = feature.iter().map(|&x| x as f64).collect();
        let posterior = domain_posterior(&feature64, self.centroids)?;
        let decision = decide_with(&raw.weighted(&posterior)?, self.config.rule);
        Ok(Detection {
            decision,
            raw,
            posterior,
            classes,
        })
    }
}

/// Single-image convenience wrapper around [`Detector`].
pub fn classify_image(
    image: &Image,
    encoder: &DualEncoder,
    bank: &PromptBank,
    centroids: &DomainCentroidBank,
    class_set: &ClassSet,
    config: &InferenceConfig,
) -> Result<Decision> {
    Ok(Detector::new(encoder, bank, centroids, class_set, config)?
        .classify(image)?
        .decision)
}

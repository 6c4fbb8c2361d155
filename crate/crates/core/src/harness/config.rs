use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{build_class_set, conditioned_text, ClassSet};
use crate::data::{check_sequence, default_domains, DomainSpec};
use crate::domain::TauMode;
use crate::encoder::{EncoderConfig, PretrainConfig, Vocabulary};
use crate::ensembler::{EnsembleRule, InferenceConfig};
use crate::error::{Error, Result};
use crate::trainer::{AugmentConfig, LogitScale, TrainConfig};
use crate::Label;

/// Caption pairs used for pre-alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainData {
    pub pairs: usize,
    pub seed: u64,
}

impl Default for PretrainData {
    fn default() -> Self {
        Self { pairs: 3000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentroidConfig {
    /// Centroids per domain.
    pub k: usize,
    pub tau: TauMode,
    pub seed: u64,
}

impl Default for CentroidConfig {
    fn default() -> Self {
        Self {
            k: 5,
            tau: TauMode::Median,
            seed: 0,
        }
    }
}

/// Everything a run depends on. Missing fields take the desk benchmark
/// values from [`RunConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `shapes`, `faces6`, or a path to a class list.
    pub classes: String,
    pub rule: EnsembleRule,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_data: PretrainData,
    pub train: TrainConfig,
    pub centroids: CentroidConfig,
    pub domains: Vec<DomainSpec>,
}

impl Default for RunConfig {
    /// The 3-domain desk benchmark: 1000/400 images per domain at 32×32.
    fn default() -> Self {
        Self {
            classes: "shapes".into(),
            rule: EnsembleRule::MaxMean,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_data: PretrainData::default(),
            train: TrainConfig {
                logit_scale: LogitScale::Fixed(100.0),
                augment: AugmentConfig {
                    flip_prob: 0.0,
                    crop_pad: 0,
                    jitter: 0.1,
                },
                ..TrainConfig::default()
            },
            centroids: CentroidConfig {
                tau: TauMode::Fixed(0.1),
                ..CentroidConfig::default()
            },
            domains: default_domains(1000, 400, 3),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn class_set(&self) -> Result<ClassSet> {
        build_class_set(&self.classes)
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            top_c: self.train.top_c,
            conditioning: self.train.conditioning,
            rule: self.rule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        check_sequence(&self.domains).map_err(|e| Error::Config(e.to_string()))?;
        if self.pretrain_data.pairs < 2 || self.pretrain.batch_size < 2 {
            return bad("pre-alignment needs at least 2 pairs and a batch of 2".into());
        }
        if self.centroids.k == 0 {
            return bad("centroids.k must be positive".into());
        }
        if let TauMode::Fixed(t) = self.centroids.tau {
            if t.is_nan() || t <= 0.0 {
                return bad(format!("tau {t} must be positive"));
            }
        }
        let classes = self.class_set()?;
        if self.train.conditioning && self.train.top_c > classes.len() {
            return Err(Error::TopCOutOfRange {
                c: self.train.top_c,
                n: classes.len(),
            });
        }
        let vocab = Vocabulary::with_default_words(self.encoder.context_length)?;
        classes.check_vocab(&vocab).map_err(|e| Error::Config(e.to_string()))?;
        let prompts = self.domains.len() * self.train.prompt_len;
        let vision = prompts + self.encoder.n_patches() + 1;
        if vision > self.encoder.vision_context {
            return bad(format!(
                "{} domains of {} prompts need {vision} vision tokens, limit {}",
                self.domains.len(),
                self.train.prompt_len,
                self.encoder.vision_context
            ));
        }
        let longest = classes
            .names()
            .iter()
            .map(|c| vocab.word_ids(&conditioned_text(Label::Real, c)).map(|w| w.len() + 2))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        if prompts + longest > self.encoder.context_length {
            return bad(format!(
                "{prompts} text prompts plus {longest} text tokens exceed the context length {}",
                self.encoder.context_length
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_eq!(cfg.fingerprint().len(), 64);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml_str("rule = \"mean\"\n[train]\nepochs_per_task = 2\nwarmup_epochs = 1\n").unwrap();
        assert_eq!(cfg.rule, EnsembleRule::Mean);
        assert_eq!(cfg.train.epochs_per_task, 2);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.domains.len(), 3);
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = RunConfig::default();
        let mut variants = vec![];
        let mut c = base.clone();
        c.train.seed = 1;
        variants.push(c);
        let mut c = base.clone();
        c.centroids.k = 4;
        variants.push(c);
        let mut c = base.clone();
        c.domains[2].n_test = 399;
        variants.push(c);
        let mut c = base.clone();
        c.encoder.causal_text = true;
        variants.push(c);
        let mut c = base.clone();
        c.pretrain.lr = 1e-3;
        variants.push(c);
        for v in &variants {
            assert_ne!(v.fingerprint(), base.fingerprint());
        }
        assert_eq!(base.clone().fingerprint(), base.fingerprint());
    }

    #[test]
    fn invalid_configs() {
        for text in [
            "unknown_field = 1",
            "classes = \"nope\"",
            "domains = []",
            "[train]\nlr = -1.0",
            "[train]\nprompt_len = 30",
            "[centroids]\ntau = { fixed = 0.0 }",
            "[train]\ntop_c = 9",
            "[encoder]\nimage_size = 30",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn duplicate_artifacts_rejected() {
        let mut cfg = RunConfig::default();
        cfg.domains[1].artifact = cfg.domains[0].artifact.clone();
        assert!(cfg.validate().unwrap_err().is_config());
    }
}

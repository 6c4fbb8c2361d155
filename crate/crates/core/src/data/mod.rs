//! Procedural domain-incremental benchmark: shape images as real content,
//! per-domain additive fingerprints as fakes.

mod artifact;
mod export;
mod render;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use artifact::{apply_artifact, Artifact};
pub use export::{export_sequence, MANIFEST};
pub use render::{check_class, render_content, render_content_sized, DEFAULT_IMAGE_SIZE};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::Label;

pub const SPLIT_TRAIN: u64 = 0;
pub const SPLIT_TEST: u64 = 1;

pub const SHAPE_CLASSES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "stripe"];

/// One domain of the sequence: a generator fingerprint and the content
/// classes it draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub artifact: Artifact,
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Image,
    pub label: Label,
    pub class: String,
    pub domain_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// The pre-alignment caption: label-blind, matching the zero-shot template.
pub fn caption(record: &SampleRecord) -> String {
    caption_for(&record.class)
}

pub fn caption_for(class: &str) -> String {
    format!("a photo of a {class}")
}

/// SplitMix64 finalizer, used to derive independent per-record seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of record `index` in split `split` (0 train, 1 test) of a domain.
pub fn record_seed(domain_seed: u64, split: u64, index: usize) -> u64 {
    splitmix64(splitmix64(domain_seed ^ (split << 62)).wrapping_add(index as u64))
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Dataset(format!("domain {} has no classes", self.domain_id)));
        }
        for c in &self.classes {
            check_class(c)?;
        }
        Ok(())
    }

    /// Record `index` of a split: odd indices are fake, classes cycle so
    /// every class gets the same number of real and fake samples.
    pub fn record(&self, split: u64, index: usize, size: usize) -> Result<SampleRecord> {
        let seed = record_seed(self.seed, split, index);
        let class = &self.classes[(index / 2) % self.classes.len()];
        let content = render_content_sized(class, size, seed)?;
        let (image, label) = if index % 2 == 1 {
            (apply_artifact(&content, &self.artifact, splitmix64(seed)), Label::Fake)
        } else {
            (content, Label::Real)
        };
        Ok(SampleRecord {
            image,
            label,
            class: class.clone(),
            domain_id: self.domain_id,
        })
    }

    /// All records of one split, `n_train` or `n_test` of them.
    pub fn split(&self, split: u64, size: usize) -> Result<Vec<SampleRecord>> {
        self.validate()?;
        let n = if split == SPLIT_TRAIN { self.n_train } else { self.n_test };
        (0..n).into_par_iter().map(|i| self.record(split, i, size)).collect()
    }
}

pub fn generate_domain(spec: &DomainSpec, size: usize) -> Result<DomainDataset> {
    spec.validate()?;
    Ok(DomainDataset {
        spec: spec.clone(),
        train: spec.split(SPLIT_TRAIN, size)?,
        test: spec.split(SPLIT_TEST, size)?,
    })
}

pub fn check_sequence(specs: &[DomainSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Dataset("empty domain sequence".into()));
    }
    let mut kinds = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !kinds.insert(s.artifact.kind()) {
            return Err(Error::Dataset(format!(
                "artifact kind {} used by more than one domain",
                s.artifact.kind()
            )));
        }
    }
    Ok(())
}

pub fn generate_sequence(specs: &[DomainSpec], size: usize) -> Result<Vec<DomainDataset>> {
    check_sequence(specs)?;
    specs.iter().map(|s| generate_domain(s, size)).collect()
}

/// Three domains with disjoint content classes and distinct fingerprints.
pub fn default_domains(n_train: usize, n_test: usize, seed: u64) -> Vec<DomainSpec> {
    let spec = |id: usize, artifact, classes: [&str; 2]| DomainSpec {
        domain_id: id,
        artifact,
        classes: classes.iter().map(|c| c.to_string()).collect(),
        n_train,
        n_test,
        seed: splitmix64(seed.wrapping_add(id as u64)),
    };
    vec![
        spec(
            1,
            Artifact::SinusoidalGrid {
                amplitude: 0.16,
                period: 4.0,
            },
            ["circle", "square"],
        ),
        spec(2, Artifact::CheckerboardUpsample { amplitude: 0.12 }, ["triangle", "cross"]),
        spec(
            3,
            Artifact::RingSpectrum {
                amplitude: 0.3,
                period: 6.0,
            },
            ["ring", "stripe"],
        ),
    ]
}

/// `(image, caption)` pairs of real content for pre-alignment.
pub fn pretrain_pairs(classes: &[&str], n: usize, size: usize, seed: u64) -> Result<Vec<(Image, String)>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let class = classes[i % classes.len()];
            let img = render_content_sized(class, size, record_seed(seed, 2, i))?;
            Ok((img, caption_for(class)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(n_train: usize, n_test: usize) -> DomainSpec {
        DomainSpec {
            domain_id: 1,
            artifact: Artifact::BlurBlock { amplitude: 0.5 },
            classes: vec!["circle".into(), "cross".into()],
            n_train,
            n_test,
            seed: 3,
        }
    }

    #[test]
    fn balance_arithmetic() {
        let ds = generate_sequence(&[one(8, 4)], 32).unwrap();
        let all: Vec<&SampleRecord> = ds[0].train.iter().chain(&ds[0].test).collect();
        assert_eq!(all.len(), 12);
        assert_eq!(all.iter().filter(|r| r.label == Label::Fake).count(), 6);
        for class in ["circle", "cross"] {
            let real = ds[0].train.iter().filter(|r| r.class == class && r.label == Label::Real).count();
            let fake = ds[0].train.iter().filter(|r| r.class == class && r.label == Label::Fake).count();
            assert_eq!((real, fake), (2, 2));
        }
    }

    #[test]
    fn default_sequence_is_distinct_and_reproducible() {
        let specs = default_domains(4, 2, 1);
        let kinds: BTreeSet<&str> = specs.iter().map(|s| s.artifact.kind()).collect();
        assert_eq!(kinds.len(), 3);
        let a = generate_sequence(&specs, 32).unwrap();
        let b = generate_sequence(&specs, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_matches_serial() {
        let spec = one(6, 0);
        let ds = generate_domain(&spec, 32).unwrap();
        for (i, r) in ds.train.iter().enumerate() {
            assert_eq!(*r, spec.record(0, i, 32).unwrap());
        }
    }

    #[test]
    fn duplicate_kinds_rejected() {
        let mut b = one(2, 2);
        b.domain_id = 2;
        assert!(matches!(generate_sequence(&[one(2, 2), b], 32), Err(Error::Dataset(_))));
        assert!(generate_sequence(&[], 32).is_err());
        let mut bad = one(2, 2);
        bad.classes = vec!["zebra".into()];
        assert!(generate_sequence(&[bad], 32).is_err());
    }

    #[test]
    fn captions_are_label_blind() {
        let ds = generate_domain(&one(2, 0), 32).unwrap();
        assert_eq!(caption(&ds.train[0]), "a photo of a circle");
        assert_eq!(caption(&ds.train[0]), caption(&ds.train[1]));
        let vocab = crate::encoder::Vocabulary::with_default_words(48).unwrap();
        assert!(crate::encoder::tokenize(&caption(&ds.train[0]), &vocab).is_ok());
    }
}

//! Zero-shot class prediction and the real/fake text templates built on it.

use std::path::Path;

use p2g_numerics::cosine_sim;
use serde::{Deserialize, Serialize};

use crate::data::SHAPE_CLASSES;
use crate::encoder::{DualEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Shapes,
    Faces6,
    File,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
    preset: Preset,
}

impl ClassSet {
    pub fn new(names: Vec<String>, preset: Preset) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyClasses);
        }
        Ok(Self { names, preset })
    }

    pub fn shapes() -> Self {
        Self {
            names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
            preset: Preset::Shapes,
        }
    }

    /// Age × gender cross product.
    pub fn faces6() -> Self {
        let mut names = Vec::with_capacity(6);
        for age in ["young", "middle-aged", "old"] {
            for gender in ["male", "female"] {
                names.push(format!("{age} {gender}"));
            }
        }
        Self {
            names,
            preset: Preset::Faces6,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Every template built from this set must tokenize.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        for n in &self.names {
            vocab.word_ids(&zero_shot_text(n))?;
            vocab.word_ids(&conditioned_text(crate::Label::Real, n))?;
            vocab.word_ids(&conditioned_text(crate::Label::Fake, n))?;
        }
        Ok(())
    }
}

/// `shapes`, `faces6`, or the path of a file with one class per line.
pub fn build_class_set(preset_or_path: &str) -> Result<ClassSet> {
    match preset_or_path {
        "shapes" => return Ok(ClassSet::shapes()),
        "faces6" => return Ok(ClassSet::faces6()),
        _ => {}
    }
    let path = Path::new(preset_or_path);
    if !path.is_file() {
        return Err(Error::UnknownPreset(preset_or_path.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    ClassSet::new(names, Preset::File)
}

pub fn zero_shot_text(class: &str) -> String {
    format!("a photo of a {class}")
}

pub fn conditioned_text(label: crate::Label, class: &str) -> String {
    format!("a {} photo of a {class}", label.word())
}

/// Texts used when conditioning is disabled.
pub fn unconditioned_text(label: crate::Label) -> String {
    format!("a {} photo", label.word())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionedPrompts {
    pub classes: Vec<String>,
    pub real_texts: Vec<String>,
    pub fake_texts: Vec<String>,
}

impl ConditionedPrompts {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// The single-pair variant with no class word.
    pub fn unconditioned() -> Self {
        Self {
            classes: vec![String::new()],
            real_texts: vec![unconditioned_text(crate::Label::Real)],
            fake_texts: vec![unconditioned_text(crate::Label::Fake)],
        }
    }
}

pub fn build_conditioned_prompts(classes: &[String]) -> Result<ConditionedPrompts> {
    if classes.is_empty() {
        return Err(Error::EmptyClasses);
    }
    Ok(ConditionedPrompts {
        classes: classes.to_vec(),
        real_texts: classes.iter().map(|c| conditioned_text(crate::Label::Real, c)).collect(),
        fake_texts: classes.iter().map(|c| conditioned_text(crate::Label::Fake, c)).collect(),
    })
}

/// Class text features for one class set, computed once.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier {
    classes: ClassSet,
    text_features: Vec<Vec<f32>>,
}

impl ZeroShotClassifier {
    pub fn new(encoder: &DualEncoder, classes: &ClassSet) -> Result<Self> {
        let text_features = classes
            .names()
            .iter()
            .map(|c| Ok(encoder.encode_text(&zero_shot_text(c), &[])?.joint_feature))
            .collect::<Result<_>>()?;
        Ok(Self {
            classes: classes.clone(),
            text_features,
        })
    }

    pub fn from_features(classes: &ClassSet, text_features: Vec<Vec<f32>>) -> Result<Self> {
        if text_features.len() != classes.len() {
            return Err(Error::Shape(format!(
                "{} text features for {} classes",
                text_features.len(),
                classes.len()
            )));
        }
        Ok(Self {
            classes: classes.clone(),
            text_features,
        })
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    /// Class indices ranked by cosine similarity, descending; ties keep the
    /// lower class index first.
    pub fn rank(&self, image_feature: &[f32]) -> Result<Vec<usize>> {
        let sims = self
            .text_features
            .iter()
            .map(|t| cosine_sim(image_feature, t))
            .collect::<p2g_numerics::Result<Vec<f32>>>()?;
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        Ok(order)
    }

    pub fn top_c(&self, image_feature: &[f32], c: usize) -> Result<Vec<String>> {
        if c == 0 || c > self.classes.len() {
            return Err(Error::TopCOutOfRange {
                c,
                n: self.classes.len(),
            });
        }
        Ok(self.rank(image_feature)?[..c]
            .iter()
            .map(|&i| self.classes.names()[i].clone())
            .collect())
    }
}

/// Top-`c` classes for `image`; one image forward plus one text forward per
/// class.
pub fn zero_shot_topc(image: &Image, class_set: &ClassSet, c: usize, encoder: &DualEncoder) -> Result<Vec<String>> {
    if c == 0 || c > class_set.len() {
        return Err(Error::TopCOutOfRange { c, n: class_set.len() });
    }
    let clf = ZeroShotClassifier::new(encoder, class_set)?;
    let f = encoder.encode_image(image, &[])?.joint_feature;
    clf.top_c(&f, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: &[&str]) -> ClassSet {
        ClassSet::new(names.iter().map(|s| s.to_string()).collect(), Preset::File).unwrap()
    }

    #[test]
    fn templates() {
        let p = build_conditioned_prompts(&["circle".to_string()]).unwrap();
        assert_eq!(p.real_texts, vec!["a real photo of a circle"]);
        assert_eq!(p.fake_texts, vec!["a fake photo of a circle"]);
        let two = build_conditioned_prompts(&["circle".into(), "square".into()]).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two.fake_texts[1], "a fake photo of a square");
        assert!(matches!(build_conditioned_prompts(&[]), Err(Error::EmptyClasses)));
        assert_eq!(ConditionedPrompts::unconditioned().real_texts[0], "a real photo");
    }

    #[test]
    fn presets() {
        let f = build_class_set("faces6").unwrap();
        assert_eq!(f.len(), 6);
        assert!(f.names().contains(&"young male".to_string()));
        assert!(f.names().contains(&"old female".to_string()));
        let s = build_class_set("shapes").unwrap();
        assert_eq!(s.names(), SHAPE_CLASSES.map(String::from).as_slice());
        assert!(matches!(build_class_set("imagenet"), Err(Error::UnknownPreset(_))));
        let vocab = Vocabulary::with_default_words(48).unwrap();
        s.check_vocab(&vocab).unwrap();
        f.check_vocab(&vocab).unwrap();
    }

    #[test]
    fn class_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classes.txt");
        std::fs::write(&path, "ring\n\nstripe\n").unwrap();
        let s = build_class_set(path.to_str().unwrap()).unwrap();
        assert_eq!(s.names(), ["ring", "stripe"]);
        assert_eq!(s.preset(), Preset::File);
        std::fs::write(&path, "").unwrap();
        assert!(matches!(build_class_set(path.to_str().unwrap()), Err(Error::EmptyClasses)));
    }

    #[test]
    fn ranking_and_ties() {
        let s = set(&["a", "b", "c"]);
        let clf = ZeroShotClassifier::from_features(&s, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(clf.rank(&[1.0, 0.1]).unwrap(), vec![0, 2, 1]);
        assert_eq!(clf.top_c(&[0.0, 2.0], 1).unwrap(), vec!["b"]);
        let mut all = clf.top_c(&[0.3, 0.4], 3).unwrap();
        all.sort();
        assert_eq!(all, vec!["a", "b", "c"]);
        assert!(matches!(clf.top_c(&[1.0, 0.0], 4), Err(Error::TopCOutOfRange { c: 4, n: 3 })));
        assert!(clf.top_c(&[1.0, 0.0], 0).is_err());

        let one = set(&["only"]);
        let clf = ZeroShotClassifier::from_features(&one, vec![vec![0.2, -1.0]]).unwrap();
        assert_eq!(clf.top_c(&[1.0, 1.0], 1).unwrap(), vec!["only"]);
    }
}

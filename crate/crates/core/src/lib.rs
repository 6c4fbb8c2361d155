//! Exemplar-free domain-incremental deepfake detection on a frozen micro
//! dual encoder.
//!
//! Each domain gets a pair of read-only prompts (visual and textual). The
//! prompts read the frozen encoder's tokens but never write into them, so
//! the prompts of every seen domain can share a single forward pass at
//! inference. A k-means domain classifier weights the per-domain scores and a
//! max/mean rule picks the final real/fake decision.

pub mod conditioning;
pub mod data;
pub mod domain;
pub mod encoder;
pub mod ensembler;
pub mod error;
pub mod harness;
pub mod image;
pub mod prompt_bank;
pub mod trainer;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use image::Image;

/// Binary detection label; fake maps to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";

/// Word-level vocabulary with start/end/padding specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    sot: usize,
    eot: usize,
    context_length: usize,
}

impl Vocabulary {
    /// Specials first, then `words` in order.
    pub fn new<I, S>(words: I, context_length: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = [PAD, SOT, EOT]
            .into_iter()
            .map(String::from)
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens, context_length)
    }

    /// Uses `tokens` verbatim; the three specials must appear somewhere.
    pub fn from_tokens(tokens: Vec<String>, context_length: usize) -> Result<Self> {
        if context_length < 3 {
            return Err(Error::InvalidVocabulary(format!(
                "context length {context_length} < 3"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        let special = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::InvalidVocabulary(format!("missing special {s}")))
        };
        Ok(Self {
            pad: special(PAD)?,
            sot: special(SOT)?,
            eot: special(EOT)?,
            tokens,
            index,
            context_length,
        })
    }

    /// Template words plus the shape and face class words.
    pub fn default_words() -> Vec<&'static str> {
        let mut words = vec!["a", "photo", "of", "real", "fake"];
        words.extend(crate::data::SHAPE_CLASSES);
        words.extend(["young", "middle-aged", "old", "male", "female"]);
        words
    }

    pub fn with_default_words(context_length: usize) -> Result<Self> {
        Self::new(Self::default_words(), context_length)
    }

    /// One token per line, UTF-8.
    pub fn load(path: &Path, context_length: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Self::from_tokens(tokens, context_length)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn sot_id(&self) -> usize {
        self.sot
    }

    pub fn eot_id(&self) -> usize {
        self.eot
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    /// Ids of every whitespace-delimited word, without framing.
    pub fn word_ids(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::OutOfVocabulary(w.to_string())))
            .collect()
    }
}

/// `[SOT, words…, EOT]` padded with PAD to the context length.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    tokenize_reserved(text, vocab, 0)
}

/// Like [`tokenize`] but `reserved` context slots are held back for prompt
/// tokens; the padded result is correspondingly shorter.
pub fn tokenize_reserved(text: &str, vocab: &Vocabulary, reserved: usize) -> Result<Vec<usize>> {
    let words = vocab.word_ids(text)?;
    let needed = words.len() + 2 + reserved;
    if needed > vocab.context_length {
        return Err(Error::TokenLengthExceeded {
            needed,
            limit: vocab.context_length,
        });
    }
    let mut ids = Vec::with_capacity(vocab.context_length - reserved);
    ids.push(vocab.sot);
    ids.extend(words);
    ids.push(vocab.eot);
    ids.resize(vocab.context_length - reserved, vocab.pad);
    Ok(ids)
}

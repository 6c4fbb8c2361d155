//! Per-task read-only prompts and the append-only bank that holds them.
//!
//! Bank file layout (little-endian): magic `P2G-PB`, u32 version, u32 T,
//! u32 L, u32 D_v, u32 D_t, then per task the f32 blocks `p_v` and `p_t`,
//! then one CRC-32 per task over that task's block bytes.

use std::path::Path;

use p2g_numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 6] = b"P2G-PB";
pub const BANK_VERSION: u32 = 1;
pub const BANK_HEADER_LEN: usize = 6 + 5 * 4;
const WHAT: &str = "prompt bank";

/// The visual and textual prompts of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompts {
    task_id: usize,
    p_v: Tensor,
    p_t: Tensor,
    trained: bool,
}

/// `L × D_v` visual and `L × D_t` text prompts drawn i.i.d. from N(0, 0.02²).
pub fn init_task_prompts(task_id: usize, l: usize, d_v: usize, d_t: usize, seed: u64) -> Result<TaskPrompts> {
    if l == 0 || d_v == 0 || d_t == 0 {
        return Err(Error::Config(format!("prompt shape {l}×({d_v}, {d_t}) has a zero dimension")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut draw = |n: usize| (0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f32>>();
    let p_v = Tensor::matrix(l, d_v, draw(l * d_v))?;
    let p_t = Tensor::matrix(l, d_t, draw(l * d_t))?;
    Ok(TaskPrompts {
        task_id,
        p_v,
        p_t,
        trained: false,
    })
}

impl TaskPrompts {
    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn p_v(&self) -> &Tensor {
        &self.p_v
    }

    pub fn p_t(&self) -> &Tensor {
        &self.p_t
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn len(&self) -> usize {
        self.p_v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p_v.is_empty()
    }

    /// Replaces the prompt contents; refused once the prompts are trained.
    pub fn update(&mut self, p_v: Tensor, p_t: Tensor) -> Result<()> {
        if self.trained {
            return Err(Error::FrozenPrompts(self.task_id));
        }
        if p_v.shape() != self.p_v.shape() || p_t.shape() != self.p_t.shape() {
            return Err(Error::Shape(format!(
                "prompt update {:?}/{:?} does not match {:?}/{:?}",
                p_v.shape(),
                p_t.shape(),
                self.p_v.shape(),
                self.p_t.shape()
            )));
        }
        self.p_v = p_v;
        self.p_t = p_t;
        Ok(())
    }

    /// Freezes the prompts for the rest of their lifetime.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// `p_v` then `p_t` as little-endian f32, as stored in the bank file.
    pub fn block_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.p_v.len() + self.p_t.len()) * 4);
        for v in self.p_v.data().iter().chain(self.p_t.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// CRC-32 of the serialized block.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.block_bytes())
    }
}

/// Append-only sequence of trained task prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    prompt_len: usize,
    d_v: usize,
    d_t: usize,
    entries: Vec<TaskPrompts>,
    checksums: Vec<u32>,
}

impl PromptBank {
    pub fn new(prompt_len: usize, d_v: usize, d_t: usize) -> Self {
        Self {
            prompt_len,
            d_v,
            d_t,
            entries: Vec::new(),
            checksums: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.prompt_len, self.d_v, self.d_t)
    }

    pub fn entries(&self) -> &[TaskPrompts] {
        &self.entries
    }

    pub fn get(&self, task_id: usize) -> Option<&TaskPrompts> {
        task_id.checked_sub(1).and_then(|i| self.entries.get(i))
    }

    /// Checksums recorded at append time, in task order.
    pub fn checksums(&self) -> &[u32] {
        &self.checksums
    }

    pub fn visual_prompts(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|e| &e.p_v).collect()
    }

    pub fn text_prompts(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|e| &e.p_t).collect()
    }

    pub fn append_task(&mut self, prompts: TaskPrompts) -> Result<()> {
        let expected = self.entries.len() + 1;
        if prompts.task_id < expected {
            return Err(Error::DuplicateTask(prompts.task_id));
        }
        if prompts.task_id > expected {
            return Err(Error::TaskGap {
                expected,
                got: prompts.task_id,
            });
        }
        if !prompts.trained {
            return Err(Error::UntrainedPrompts(prompts.task_id));
        }
        if prompts.p_v.shape() != [self.prompt_len, self.d_v] || prompts.p_t.shape() != [self.prompt_len, self.d_t] {
            return Err(Error::Shape(format!(
                "task {} prompts {:?}/{:?} do not fit a bank of L={}, D_v={}, D_t={}",
                prompts.task_id,
                prompts.p_v.shape(),
                prompts.p_t.shape(),
                self.prompt_len,
                self.d_v,
                self.d_t
            )));
        }
        self.checksums.push(prompts.checksum());
        self.entries.push(prompts);
        Ok(())
    }

    /// Re-hashes every entry against the recorded checksums.
    pub fn verify(&self) -> Result<()> {
        for (e, &c) in self.entries.iter().zip(&self.checksums) {
            if e.checksum() != c {
                return Err(Error::ChecksumMismatch {
                    what: WHAT,
                    task: Some(e.task_id),
                });
            }
        }
        Ok(())
    }

    /// Exact serialized size for the current contents.
    pub fn serialized_len(&self) -> usize {
        BANK_HEADER_LEN + self.entries.len() * (self.prompt_len * (self.d_v + self.d_t) * 4 + 4)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(BANK_MAGIC);
        for v in [
            BANK_VERSION,
            self.entries.len() as u32,
            self.prompt_len as u32,
            self.d_v as u32,
            self.d_t as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&e.block_bytes());
        }
        for c in &self.checksums {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BANK_MAGIC.len() || &bytes[..BANK_MAGIC.len()] != BANK_MAGIC {
            return Err(Error::BadMagic { what: WHAT });
        }
        if bytes.len() < BANK_HEADER_LEN {
            return Err(Error::Truncated { what: WHAT });
        }
        let word = |i: usize| {
            let o = BANK_MAGIC.len() + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let version = word(0) as u32;
        if version != BANK_VERSION {
            return Err(Error::VersionMismatch { what: WHAT, found: version });
        }
        let (t, l, d_v, d_t) = (word(1), word(2), word(3), word(4));
        let mut bank = PromptBank::new(l, d_v, d_t);
        let block = l * (d_v + d_t) * 4;
        if bytes.len() != bank.serialized_len() + t * (block + 4) {
            return Err(Error::Truncated { what: WHAT });
        }
        let crc_at = BANK_HEADER_LEN + t * block;
        for k in 0..t {
            let raw = &bytes[BANK_HEADER_LEN + k * block..BANK_HEADER_LEN + (k + 1) * block];
            let o = crc_at + 4 * k;
            let crc = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
            if crc32fast::hash(raw) != crc {
                return Err(Error::ChecksumMismatch {
                    what: WHAT,
                    task: Some(k + 1),
                });
            }
            let floats: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let (v, tx) = floats.split_at(l * d_v);
            let prompts = TaskPrompts {
                task_id: k + 1,
                p_v: Tensor::matrix(l, d_v, v.to_vec())?,
                p_t: Tensor::matrix(l, d_t, tx.to_vec())?,
                trained: true,
            };
            bank.append_task(prompts)?;
        }
        Ok(bank)
    }
}

pub fn save_bank(bank: &PromptBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<PromptBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    PromptBank::from_bytes(&bytes)
}

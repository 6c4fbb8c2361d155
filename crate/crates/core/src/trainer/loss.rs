//! Prompt-output similarities and the two-way contrastive loss.

use p2g_numerics::{cosine_sim, Graph, NodeId, Real, Tensor};

use crate::error::{Error, Result};
use crate::Label;

/// Mean over rows of the row-wise cosine similarity of `v` and `t`.
pub fn averaged_similarity<T: Real>(v: &Tensor<T>, t: &Tensor<T>) -> Result<T> {
    if v.shape() != t.shape() || v.shape().len() != 2 || v.rows() == 0 {
        return Err(Error::Shape(format!(
            "similarity of {:?} and {:?}",
            v.shape(),
            t.shape()
        )));
    }
    let mut sum = T::zero();
    for i in 0..v.rows() {
        sum = sum + cosine_sim(v.row(i), t.row(i))?;
    }
    Ok(sum / T::lit(v.rows() as f64))
}

/// Visual outputs of one task with the `c` real and `c` fake text outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTriple<T: Real = f32> {
    pub v: Tensor<T>,
    pub r: Vec<Tensor<T>>,
    pub f: Vec<Tensor<T>>,
}

impl<T: Real> PromptTriple<T> {
    /// `(s_r, s_f)`: similarities averaged over rows and over the `c` texts.
    pub fn scores(&self) -> Result<(T, T)> {
        if self.r.is_empty() || self.r.len() != self.f.len() {
            return Err(Error::Shape(format!(
                "{} real and {} fake text outputs",
                self.r.len(),
                self.f.len()
            )));
        }
        let mean = |texts: &[Tensor<T>]| -> Result<T> {
            let mut s = T::zero();
            for t in texts {
                s = s + averaged_similarity(&self.v, t)?;
            }
            Ok(s / T::lit(texts.len() as f64))
        };
        Ok((mean(&self.r)?, mean(&self.f)?))
    }
}

/// `−log softmax(σ·[s_r, s_f])[label]`.
pub fn cce_from_scores(s_r: f64, s_f: f64, label: Label, logit_scale: f64) -> Result<f64> {
    if !(s_r.is_finite() && s_f.is_finite()) {
        return Err(Error::Numerics(p2g_numerics::NumericsError::NonFinite { op: "cce" }));
    }
    let (a, b) = (logit_scale * s_r, logit_scale * s_f);
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    Ok(lse - if label == Label::Real { a } else { b })
}

pub fn contrastive_cce_loss<T: Real>(triple: &PromptTriple<T>, label: Label, logit_scale: f64) -> Result<f64> {
    if logit_scale.is_nan() || logit_scale <= 0.0 {
        return Err(Error::Config(format!("logit scale {logit_scale} must be positive")));
    }
    let (s_r, s_f) = triple.scores()?;
    cce_from_scores(s_r.as_f64(), s_f.as_f64(), label, logit_scale)
}

/// Graph form of [`averaged_similarity`] on already row-normalized inputs.
pub(crate) fn graph_similarity<T: Real>(g: &mut Graph<T>, v_unit: NodeId, t_unit: NodeId) -> Result<NodeId> {
    let rows = g.value(v_unit).rows();
    let p = g.mul(v_unit, t_unit)?;
    let s = g.sum(p)?;
    Ok(g.scale(s, 1.0 / rows as f64)?)
}

/// Graph mean over `texts` of the similarity to `v_unit`; `[1 × 1]`.
pub(crate) fn graph_mean_similarity<T: Real>(g: &mut Graph<T>, v_unit: NodeId, texts: &[NodeId]) -> Result<NodeId> {
    let sims = texts
        .iter()
        .map(|&t| graph_similarity(g, v_unit, t))
        .collect::<Result<Vec<_>>>()?;
    let row = g.concat_cols(&sims)?;
    Ok(g.mean(row)?)
}

/// Mean cross-entropy over rows of `σ·[s_r, s_f]` logits.
pub(crate) fn graph_batch_loss<T: Real>(
    g: &mut Graph<T>,
    pairs: &[(NodeId, NodeId)],
    labels: &[Label],
    logit_scale: f64,
) -> Result<NodeId> {
    let rows = pairs
        .iter()
        .map(|&(r, f)| Ok(g.concat_cols(&[r, f])?))
        .collect::<Result<Vec<_>>>()?;
    let logits = g.concat_rows(&rows)?;
    let logits = g.scale(logits, logit_scale)?;
    let mut targets = vec![T::zero(); labels.len() * 2];
    for (i, l) in labels.iter().enumerate() {
        targets[i * 2 + l.as_index()] = T::one();
    }
    Ok(g.soft_cross_entropy(logits, Tensor::matrix(labels.len(), 2, targets)?)?)
}

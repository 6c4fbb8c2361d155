use crate::error::{NumericsError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Boolean `[n_query × n_key]` matrix; `true` means the query may attend to
/// the key.
///
/// Only two constructors exist: [`AttentionMask::all_allowed`] and
/// [`AttentionMask::read_only`]. Both guarantee every query row has at least
/// one allowed key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_query: usize,
    n_key: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn all_allowed(n_query: usize, n_key: usize) -> Self {
        Self {
            n_query,
            n_key,
            allow: vec![true; n_query * n_key],
        }
    }

    /// Read-only prompt mask over the sequence `[prompts…, originals…]`.
    ///
    /// The first `groups · group_len` positions are prompt tokens. Original
    /// tokens attend only to original tokens (to earlier ones only when
    /// `causal_originals` is set). A prompt token attends to every original
    /// token and to itself, never to another prompt token.
    pub fn read_only(
        n_orig: usize,
        groups: usize,
        group_len: usize,
        causal_originals: bool,
    ) -> Result<Self> {
        if n_orig == 0 {
            return Err(NumericsError::InvalidArgument(
                "read-only mask needs at least one original token".into(),
            ));
        }
        let n_prompt = groups * group_len;
        let n = n_prompt + n_orig;
        let mut allow = vec![false; n * n];
        for q in 0..n {
            let row = &mut allow[q * n..(q + 1) * n];
            if q < n_prompt {
                row[q] = true;
                row[n_prompt..].iter_mut().for_each(|a| *a = true);
            } else {
                let last = if causal_originals { q + 1 } else { n };
                row[n_prompt..last].iter_mut().for_each(|a| *a = true);
            }
        }
        Ok(Self {
            n_query: n,
            n_key: n,
            allow,
        })
    }

    /// Restricts the mask to query rows `start..start+len`, keeping all keys.
    pub fn query_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_query {
            return Err(NumericsError::InvalidArgument(format!(
                "query rows {start}+{len} out of {}",
                self.n_query
            )));
        }
        Ok(Self {
            n_query: len,
            n_key: self.n_key,
            allow: self.allow[start * self.n_key..(start + len) * self.n_key].to_vec(),
        })
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_key(&self) -> usize {
        self.n_key
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.n_key + key]
    }

    pub fn row_count(&self, query: usize) -> usize {
        self.allow[query * self.n_key..(query + 1) * self.n_key]
            .iter()
            .filter(|a| **a)
            .count()
    }

    pub fn is_all_allowed(&self) -> bool {
        self.allow.iter().all(|a| *a)
    }
}

/// Single-head scaled dot-product attention under `mask`.
///
/// Row `i` of the result is the softmax over allowed keys of
/// `q_i·k_j / sqrt(d)` applied to the rows of `v`.
pub fn attention_masked<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    let (out, _) = attention_forward(q, k, v, 1, mask)?;
    Ok(out)
}

pub(crate) fn check_attention_shapes<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: &AttentionMask,
) -> Result<()> {
    let mismatch = |left: &Tensor<T>, right: &Tensor<T>| NumericsError::ShapeMismatch {
        op: "attention",
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    };
    if q.cols() != k.cols() {
        return Err(mismatch(q, k));
    }
    if k.rows() != v.rows() {
        return Err(mismatch(k, v));
    }
    if mask.n_query() != q.rows() || mask.n_key() != k.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "attention mask",
            left: vec![mask.n_query(), mask.n_key()],
            right: vec![q.rows(), k.rows()],
        });
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) || !v.cols().is_multiple_of(heads) {
        return Err(NumericsError::InvalidArgument(format!(
            "widths {}/{} not divisible into {heads} heads",
            q.cols(),
            v.cols()
        )));
    }
    for row in 0..mask.n_query() {
        if mask.row_count(row) == 0 {
            return Err(NumericsError::FullyMaskedRow { row });
        }
    }
    Ok(())
}

/// Multi-head forward. Head `h` uses column block `h` of `q`, `k` and `v`.
/// Returns the output and the attention probabilities laid out
/// `[heads × n_query × n_key]`.
pub(crate) fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: &AttentionMask,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_attention_shapes(q, k, v, heads, mask)?;
    let (nq, nk) = (q.rows(), k.rows());
    let (wk, wv) = (q.cols(), v.cols());
    let (dk, dv) = (wk / heads, wv / heads);
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut out = vec![T::zero(); nq * wv];
    for h in 0..heads {
        for i in 0..nq {
            let qi = &qd[i * wk + h * dk..i * wk + (h + 1) * dk];
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let mut max = T::neg_infinity();
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = if mask.allowed(i, j) {
                    let kj = &kd[j * wk + h * dk..j * wk + (h + 1) * dk];
                    let mut s = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s = s + a * b;
                    }
                    s * scale
                } else {
                    T::MASK_FILL
                };
                max = max.max(*pj);
            }
            let mut sum = T::zero();
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                sum = sum + *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / sum;
            }
            let orow = &mut out[i * wv + h * dv..i * wv + (h + 1) * dv];
            for (j, &pj) in p.iter().enumerate() {
                if pj == T::zero() {
                    continue;
                }
                let vj = &vd[j * wv + h * dv..j * wv + (h + 1) * dv];
                for (o, &x) in orow.iter_mut().zip(vj) {
                    *o = *o + pj * x;
                }
            }
        }
    }
    Ok((Tensor::matrix_unchecked(nq, wv, out), probs))
}

/// Gradients of the multi-head attention with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    dout: &Tensor<T>,
    want: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let (nq, nk) = (q.rows(), k.rows());
    let (wk, wv) = (q.cols(), v.cols());
    let (dk, dv) = (wk / heads, wv / heads);
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let (qd, kd, vd, dod) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![T::zero(); nq * wk];
    let mut dkm = vec![T::zero(); nk * wk];
    let mut dvm = vec![T::zero(); nk * wv];
    let mut dp = vec![T::zero(); nk];
    for h in 0..heads {
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let doi = &dod[i * wv + h * dv..i * wv + (h + 1) * dv];
            let mut dot_pdp = T::zero();
            for j in 0..nk {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                let vj = &vd[j * wv + h * dv..j * wv + (h + 1) * dv];
                let mut s = T::zero();
                for (&a, &b) in doi.iter().zip(vj) {
                    s = s + a * b;
                }
                dp[j] = s;
                dot_pdp = dot_pdp + p[j] * s;
                if want[2] {
                    let dvj = &mut dvm[j * wv + h * dv..j * wv + (h + 1) * dv];
                    for (o, &g) in dvj.iter_mut().zip(doi) {
                        *o = *o + p[j] * g;
                    }
                }
            }
            let qi = &qd[i * wk + h * dk..i * wk + (h + 1) * dk];
            for j in 0..nk {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot_pdp) * scale;
                if want[0] {
                    let kj = &kd[j * wk + h * dk..j * wk + (h + 1) * dk];
                    let dqi = &mut dq[i * wk + h * dk..i * wk + (h + 1) * dk];
                    for (o, &x) in dqi.iter_mut().zip(kj) {
                        *o = *o + ds * x;
                    }
                }
                if want[1] {
                    let dkj = &mut dkm[j * wk + h * dk..j * wk + (h + 1) * dk];
                    for (o, &x) in dkj.iter_mut().zip(qi) {
                        *o = *o + ds * x;
                    }
                }
            }
        }
    }
    [
        want[0].then(|| Tensor::matrix_unchecked(nq, wk, dq)),
        want[1].then(|| Tensor::matrix_unchecked(nk, wk, dkm)),
        want[2].then(|| Tensor::matrix_unchecked(nk, wv, dvm)),
    ]
}

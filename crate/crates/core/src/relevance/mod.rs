//! The unified relevance scorer `rel(d, q) = (1/Z) sum(D^T Q ⊙ A)` and the
//! generative-retrieval quantities that reduce to it.

mod kernel;

pub use kernel::{elu_plus_one, feature_map, rel_kernelized, trace_pair, KernelizedRelevance, PairCheck};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_attention, AlignmentMatrix};
use crate::encoding::{
    embed_static, encode_with, pawa_encode, AttentionCache, ContextualStore, EmbeddingTable, PawaBank,
    SelfAttention, TokenId, TokenMatrix, BOS, RESERVED,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, logsumexp, softmax_masked, Matrix};

/// Relevance with both marginal decompositions of the double sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub value: f64,
    /// Contribution of each document position (summed over query tokens).
    pub per_position: Vec<f64>,
    /// Contribution of each query token (summed over document positions).
    pub per_query_token: Vec<f64>,
}

/// `(1/Z) sum_ij (d_i . q_j) A_ij`.
///
/// `value` is accumulated query token by query token, so with a one-hot
/// top-1 alignment it equals `sum_j max_i d_i . q_j` bit for bit.
pub fn rel_unified(d: &TokenMatrix, q: &TokenMatrix, a: &AlignmentMatrix) -> Result<RelevanceScore> {
    if a.shape() != (d.len(), q.len()) {
        return Err(Error::ShapeMismatch { op: "rel_unified", left: a.shape(), right: (d.len(), q.len()) });
    }
    if !(a.z > 0.0 && a.z.is_finite()) {
        return Err(Error::invalid(format!("normalizer Z must be positive, got {}", a.z)));
    }
    let sim = d.similarity(q)?;
    let (m, n) = a.shape();
    let mut per_position = vec![0.0; m];
    let mut per_query_token = vec![0.0; n];
    for (j, total) in per_query_token.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..m {
            s += sim.get(i, j) * a.get(i, j);
        }
        *total = s / a.z;
    }
    for (i, total) in per_position.iter_mut().enumerate() {
        let s: f64 = (0..n).map(|j| sim.get(i, j) * a.get(i, j)).sum();
        *total = s / a.z;
    }
    let value = per_query_token.iter().sum();
    Ok(RelevanceScore { value, per_position, per_query_token })
}

/// Decoder-side parameters of the generative model.
///
/// `w` is the merged cross-attention bilinear form `W_K^T W_Q`; the decoder
/// state fed at step `i` comes from a causal self-attention layer over the
/// right-shifted identifier `[BOS, d_1, .., d_{i-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub table: EmbeddingTable,
    pub decoder: SelfAttention,
    pub w: Matrix,
    pub w_v: Matrix,
}

impl DecoderParams {
    pub fn new(table: EmbeddingTable, decoder: SelfAttention, w: Matrix, w_v: Matrix) -> Result<Self> {
        let d = table.dim();
        for m in [&w, &w_v, &decoder.w_query] {
            if m.shape() != (d, d) {
                return Err(Error::ShapeMismatch { op: "decoder params", left: m.shape(), right: (d, d) });
            }
        }
        Ok(Self { table, decoder, w, w_v })
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }
}

/// `[BOS, d_1, .., d_{M-1}]`.
pub fn shift_right(doc_ids: &[TokenId]) -> Vec<TokenId> {
    let mut shifted = Vec::with_capacity(doc_ids.len());
    shifted.push(BOS);
    shifted.extend_from_slice(&doc_ids[..doc_ids.len().saturating_sub(1)]);
    shifted
}

/// Decoder states `D̂₋₁`, one row per identifier position.
pub fn decoder_states(doc_ids: &[TokenId], params: &DecoderParams) -> Result<TokenMatrix> {
    decoder_states_cached(doc_ids, params).map(|(s, _)| s)
}

pub(crate) fn decoder_states_cached(doc_ids: &[TokenId], params: &DecoderParams) -> Result<(TokenMatrix, AttentionCache)> {
    if doc_ids.is_empty() {
        return Err(Error::Empty("document identifier"));
    }
    let (seq, cache) = encode_with(&shift_right(doc_ids), &params.table, &params.decoder, true)?;
    Ok((seq.vectors, cache))
}

/// Intermediates of one teacher-forced cross-attention pass.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub states: TokenMatrix,
    pub attention: AlignmentMatrix,
    /// Row `i` is `Q alpha_i`.
    pub context: Matrix,
    /// Row `i` is `h_i = W_V Q alpha_i`, the prediction head input.
    pub hidden: Matrix,
}

pub fn cross_attention(doc_ids: &[TokenId], q: &TokenMatrix, params: &DecoderParams) -> Result<CrossAttention> {
    let states = decoder_states(doc_ids, params)?;
    let attention = align_attention(&states, q, &params.w)?;
    let context = attention.matrix.matmul(q.rows())?;
    let hidden = context.matmul_nt(&params.w_v)?;
    Ok(CrossAttention { states, attention, context, hidden })
}

/// Target logits `e_{d_i} . h_i` from the literal forward pass.
pub fn target_logits(doc_ids: &[TokenId], q: &TokenMatrix, params: &DecoderParams) -> Result<Vec<f64>> {
    let ca = cross_attention(doc_ids, q, params)?;
    doc_ids
        .iter()
        .enumerate()
        .map(|(i, &v)| Ok(dot(params.table.vector(v)?, ca.hidden.row(i))))
        .collect()
}

/// `sum(Ẽ_d^T Q ⊙ A)` with `Ẽ_d = W_V^T E_d` and cross-attention alignment.
pub fn rel_gr(doc_ids: &[TokenId], q: &TokenMatrix, params: &DecoderParams) -> Result<RelevanceScore> {
    let states = decoder_states(doc_ids, params)?;
    let a = align_attention(&states, q, &params.w)?;
    let e = embed_static(doc_ids, &params.table)?.vectors;
    rel_unified(&e.map_linear(&params.w_v.transpose())?, q, &a)
}

/// `sum_i (E_{i,d_i} d'_i)^T W_V Q alpha_i`, without materializing the
/// block-diagonal latent matrix.
pub fn rel_pawa(
    doc_ids: &[TokenId],
    q: &TokenMatrix,
    params: &DecoderParams,
    bank: &PawaBank,
    latents: &TokenMatrix,
) -> Result<RelevanceScore> {
    let states = decoder_states(doc_ids, params)?;
    let a = align_attention(&states, q, &params.w)?;
    let e = pawa_encode(doc_ids, bank, latents)?;
    rel_unified(&e.map_linear(&params.w_v.transpose())?, q, &a)
}

/// Nonparametric decoding: stored contextual vectors of document `doc`
/// stand in for the embedding table.
pub fn rel_np(doc: usize, q: &TokenMatrix, store: &ContextualStore, params: &DecoderParams) -> Result<RelevanceScore> {
    let stored = store.document(doc)?;
    let states = decoder_states(&stored.ids, params)?;
    let a = align_attention(&states, q, &params.w)?;
    rel_unified(&stored.vectors, q, &a)
}

/// Output candidates for the teacher-forcing loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// Softmax over the whole vocabulary.
    Full,
    /// Softmax over the target plus these tokens, shared across positions.
    Sampled(Vec<TokenId>),
}

impl Negatives {
    /// Candidate ids at one position and the index of the target among them.
    pub fn candidates(&self, target: TokenId, vocab_size: usize) -> (Vec<TokenId>, usize) {
        match self {
            Negatives::Full => ((0..vocab_size).collect(), target),
            Negatives::Sampled(neg) => {
                let mut c = Vec::with_capacity(neg.len() + 1);
                c.push(target);
                c.extend_from_slice(neg);
                (c, 0)
            }
        }
    }

    pub fn validate(&self, targets: &[TokenId]) -> Result<()> {
        if let Negatives::Sampled(neg) = self {
            if neg.is_empty() {
                return Err(Error::Empty("negative sample"));
            }
            if let Some(t) = neg.iter().find(|t| targets.contains(t)) {
                return Err(Error::invalid(format!("negative sample contains target token {t}")));
            }
        }
        Ok(())
    }
}

/// Draws `count` distinct non-reserved tokens that are not targets.
pub fn sample_negatives(
    vocab_size: usize,
    targets: &[TokenId],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    let pool: Vec<TokenId> = (RESERVED.len()..vocab_size).filter(|t| !targets.contains(t)).collect();
    if count == 0 || pool.is_empty() {
        return Err(Error::Empty("negative sample"));
    }
    let count = count.min(pool.len());
    let mut picked: Vec<TokenId> = sample(rng, pool.len(), count).into_iter().map(|k| pool[k]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-position softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeLoss {
    pub loss: f64,
    pub per_position: Vec<f64>,
    /// Materialized logits per position, aligned with `candidates`.
    pub logits: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<TokenId>>,
    pub target_index: Vec<usize>,
}

/// `-z[target] + logsumexp(z)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid("target index outside logits"));
    }
    Ok(logsumexp(logits) - logits[target])
}

/// Cross-entropy of `h_i` against the rows of `output` (one per token id).
pub fn ce_from_hidden(hidden: &Matrix, targets: &[TokenId], output: &EmbeddingTable, negatives: &Negatives) -> Result<CeLoss> {
    if hidden.rows() != targets.len() {
        return Err(Error::invalid("one hidden state per target required"));
    }
    negatives.validate(targets)?;
    let mut out = CeLoss { loss: 0.0, per_position: vec![], logits: vec![], candidates: vec![], target_index: vec![] };
    for (i, &t) in targets.iter().enumerate() {
        let (cand, ti) = negatives.candidates(t, output.vocab_size());
        let z = cand
            .iter()
            .map(|&v| Ok(dot(output.vector(v)?, hidden.row(i))))
            .collect::<Result<Vec<_>>>()?;
        let l = cross_entropy(&z, ti)?;
        out.loss += l;
        out.per_position.push(l);
        out.logits.push(z);
        out.candidates.push(cand);
        out.target_index.push(ti);
    }
    Ok(out)
}

/// Teacher-forced cross-entropy of generating `doc_ids` given `q`.
pub fn loss_ce_teacher_forcing(
    doc_ids: &[TokenId],
    q: &TokenMatrix,
    params: &DecoderParams,
    negatives: &Negatives,
) -> Result<CeLoss> {
    let ca = cross_attention(doc_ids, q, params)?;
    ce_from_hidden(&ca.hidden, doc_ids, &params.table, negatives)
}

/// Deviation of cross-entropy under logits scaled by `eps` from its
/// first-order form `ln|V| - eps * s`.
///
/// Softmax ignores a common shift of the logits while `s` does not, so the
/// literal form is off by `eps * mean(z)` to first order. The centered form
/// `ln|V| - eps * (s - mean(z))` is exact to first order and leaves a
/// second-order remainder of at most `(eps * max|z - mean(z)|)^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportionality {
    pub ce: f64,
    pub first_order: f64,
    pub deviation: f64,
    /// `eps * max|z|`, which bounds `deviation`.
    pub bound: f64,
    pub centered_deviation: f64,
    pub centered_bound: f64,
}

pub fn proportionality(logits: &[f64], target: usize, eps: f64) -> Result<Proportionality> {
    let scaled: Vec<f64> = logits.iter().map(|z| eps * z).collect();
    let ce = cross_entropy(&scaled, target)?;
    let ln_v = (logits.len() as f64).ln();
    let first_order = ln_v - eps * logits[target];
    let max_abs = logits.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    let mean = logits.iter().sum::<f64>() / logits.len() as f64;
    let spread = logits.iter().fold(0.0f64, |m, z| m.max((z - mean).abs()));
    Ok(Proportionality {
        ce,
        first_order,
        deviation: (ce - first_order).abs(),
        bound: eps * max_abs,
        centered_deviation: (ce - (ln_v - eps * (logits[target] - mean))).abs(),
        centered_bound: (eps * spread).powi(2) / 2.0,
    })
}

/// `-log softmax(scores)[positive]`.
pub fn loss_contrastive(scores: &[f64], positive: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    cross_entropy(scores, positive)
}

/// Mean in-batch contrastive loss; `scores[a][b] = rel(d_b, q_a)`, positives on the diagonal.
pub fn loss_in_batch(scores: &Matrix) -> Result<f64> {
    if scores.rows() != scores.cols() {
        return Err(Error::ShapeMismatch { op: "loss_in_batch", left: scores.shape(), right: (scores.rows(), scores.rows()) });
    }
    let n = scores.rows();
    let mut total = 0.0;
    for a in 0..n {
        total += loss_contrastive(scores.row(a), a)?;
    }
    Ok(total / n as f64)
}

/// Softmax over `scores` minus the one-hot of `positive`: the loss gradient.
pub(crate) fn contrastive_grad(scores: &[f64], positive: usize) -> Vec<f64> {
    let mut g = softmax_masked(scores, None);
    g[positive] -= 1.0;
    g
}

#[cfg(test)]
mod tests;

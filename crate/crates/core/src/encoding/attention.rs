//! Single-head self-attention with a residual connection and no nonlinearity.
//!
//! For token vectors `x_1..x_n`:
//!
//! ```text
//! s_jk  = <Wq x_j, Wk x_k> / sqrt(d)      (masked keys excluded)
//! p_j   = softmax_k(s_jk)
//! out_j = x_j + Wv * sum_k p_jk x_k
//! ```
//!
//! The backward pass is written out by hand; the trainer uses it for both the
//! query/document encoder and the causal decoder layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{embed_static, uniform_matrix, EmbeddingTable, EncodedSequence, TokenMatrix};
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::linalg::{softmax_masked, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
}

/// Intermediates kept by [`SelfAttention::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Matrix,
    a: Matrix,
    b: Matrix,
    p: Matrix,
    c: Matrix,
}

impl AttentionCache {
    /// Attention weights, row `j` over keys `k`.
    pub fn weights(&self) -> &Matrix {
        &self.p
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub input: Matrix,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
}

impl SelfAttention {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_query: Matrix::zeros(dim, dim),
            w_key: Matrix::zeros(dim, dim),
            w_value: Matrix::zeros(dim, dim),
        }
    }

    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_query: uniform_matrix(dim, dim, rng),
            w_key: uniform_matrix(dim, dim, rng),
            w_value: uniform_matrix(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_query.rows()
    }

    fn check(&self, dim: usize) -> Result<()> {
        for w in [&self.w_query, &self.w_key, &self.w_value] {
            if w.shape() != (dim, dim) {
                return Err(Error::ShapeMismatch {
                    op: "self_attention",
                    left: w.shape(),
                    right: (dim, dim),
                });
            }
        }
        Ok(())
    }

    /// `key_mask[k]` false excludes key `k`; `causal` further restricts row `j` to keys `k <= j`.
    pub fn forward(
        &self,
        x: &TokenMatrix,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<(TokenMatrix, AttentionCache)> {
        let n = x.len();
        let d = x.dim();
        self.check(d)?;
        if key_mask.len() != n {
            return Err(Error::invalid("key mask length differs from sequence length"));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::Empty("all-padding sequence"));
        }
        let x = x.rows().clone();
        let a = x.matmul_nt(&self.w_query)?;
        let b = x.matmul_nt(&self.w_key)?;
        let scale = 1.0 / (d as f64).sqrt();
        let s = a.matmul_nt(&b)?;
        let mut p = Matrix::zeros(n, n);
        let mut row_mask = vec![false; n];
        for j in 0..n {
            for (k, m) in row_mask.iter_mut().enumerate() {
                *m = key_mask[k] && (!causal || k <= j);
            }
            let logits: Vec<f64> = s.row(j).iter().map(|v| v * scale).collect();
            p.row_mut(j).copy_from_slice(&softmax_masked(&logits, Some(&row_mask)));
        }
        let c = p.matmul(&x)?;
        let mut out = x.clone();
        out.add_scaled(1.0, &c.matmul_nt(&self.w_value)?)?;
        Ok((TokenMatrix::new(out), AttentionCache { x, a, b, p, c }))
    }

    /// Gradients of a scalar loss given `grad_out = dL/d(out)` (same shape as the output).
    pub fn backward(&self, cache: &AttentionCache, grad_out: &Matrix) -> Result<AttentionGrads> {
        let d = cache.x.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dx = grad_out.clone();
        let d_value = grad_out.matmul_tn(&cache.c)?;
        let dc = grad_out.matmul(&self.w_value)?;
        let dp = dc.matmul_nt(&cache.x)?;
        dx.add_scaled(1.0, &cache.p.matmul_tn(&dc)?)?;
        let n = cache.p.rows();
        let mut ds = Matrix::zeros(n, n);
        for j in 0..n {
            let p = cache.p.row(j);
            let g = dp.row(j);
            let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for (k, out) in ds.row_mut(j).iter_mut().enumerate() {
                *out = p[k] * (g[k] - inner) * scale;
            }
        }
        let da = ds.matmul(&cache.b)?;
        let db = ds.matmul_tn(&cache.a)?;
        let w_query = da.matmul_tn(&cache.x)?;
        let w_key = db.matmul_tn(&cache.x)?;
        dx.add_scaled(1.0, &da.matmul(&self.w_query)?)?;
        dx.add_scaled(1.0, &db.matmul(&self.w_key)?)?;
        Ok(AttentionGrads { input: dx, w_query, w_key, w_value: d_value })
    }
}

/// Embeds `ids` and applies bidirectional self-attention over the real tokens.
pub fn encode_contextual(
    ids: &[TokenId],
    table: &EmbeddingTable,
    attn: &SelfAttention,
) -> Result<EncodedSequence> {
    encode_with(ids, table, attn, false).map(|(seq, _)| seq)
}

/// Like [`encode_contextual`] but position `j` only attends to positions `<= j`.
pub fn encode_causal(
    ids: &[TokenId],
    table: &EmbeddingTable,
    attn: &SelfAttention,
) -> Result<EncodedSequence> {
    encode_with(ids, table, attn, true).map(|(seq, _)| seq)
}

pub(crate) fn encode_with(
    ids: &[TokenId],
    table: &EmbeddingTable,
    attn: &SelfAttention,
    causal: bool,
) -> Result<(EncodedSequence, AttentionCache)> {
    let embedded = embed_static(ids, table)?;
    let (out, cache) = attn.forward(&embedded.vectors, &embedded.mask, causal)?;
    Ok((EncodedSequence::new(embedded.ids, out)?, cache))
}

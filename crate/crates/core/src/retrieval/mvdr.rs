//! Token-level nearest-neighbour retrieval followed by exact scoring.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::rank_documents;
use crate::alignment::Direction;
use crate::encoding::{TokenId, TokenMatrix};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{dot, Matrix};
use crate::model::MvdrModel;

/// Every document token vector of the corpus, stacked in document order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVectorPool {
    vectors: Matrix,
    doc_of: Vec<usize>,
    /// Row range of document `k` is `offsets[k]..offsets[k + 1]`.
    offsets: Vec<usize>,
}

impl TokenVectorPool {
    pub fn build(model: &MvdrModel, corpus: &Corpus, exec: Execution) -> Result<Self> {
        let encoded = exec.try_map(corpus.all_tokens(), |ids| model.encode_doc(ids))?;
        let mut rows = Vec::new();
        let mut doc_of = Vec::new();
        let mut offsets = vec![0];
        for (doc, m) in encoded.iter().enumerate() {
            for i in 0..m.len() {
                rows.push(m.vector(i).to_vec());
                doc_of.push(doc);
            }
            offsets.push(rows.len());
        }
        Ok(Self { vectors: Matrix::from_rows(&rows)?, doc_of, offsets })
    }

    pub fn len(&self) -> usize {
        self.doc_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_of.is_empty()
    }

    pub fn documents(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn document_of(&self, row: usize) -> usize {
        self.doc_of[row]
    }

    pub fn doc_matrix(&self, doc: usize) -> Result<TokenMatrix> {
        if doc >= self.documents() {
            return Err(Error::UnknownDocument(format!("document index {doc}")));
        }
        let rows: Vec<Vec<f64>> = (self.offsets[doc]..self.offsets[doc + 1])
            .map(|r| self.vectors.row(r).to_vec())
            .collect();
        TokenMatrix::from_vectors(&rows)
    }

    /// Exact `k` best rows by inner product, ties to the lower row.
    pub fn nearest(&self, v: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|r| (r, dot(self.vectors.row(r), v))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvdrRetrieval {
    pub ranked: Vec<(usize, f64)>,
    /// Documents owning any retrieved token vector, ascending.
    pub candidates: Vec<usize>,
}

/// Gathers the `k_token` nearest pool vectors of every query token, then
/// scores the owning documents exactly with top-1 query-to-document
/// alignment and keeps the best `k_final`.
pub fn retrieve_mvdr(
    model: &MvdrModel,
    pool: Option<&TokenVectorPool>,
    corpus: &Corpus,
    query_ids: &[TokenId],
    k_token: usize,
    k_final: usize,
    exec: Execution,
) -> Result<MvdrRetrieval> {
    let pool = pool.ok_or(Error::PoolNotBuilt)?;
    if pool.is_empty() {
        return Err(Error::PoolNotBuilt);
    }
    if k_token == 0 || k_final == 0 {
        return Err(Error::invalid("k_token and k_final must be at least 1"));
    }
    if pool.documents() != corpus.len() {
        return Err(Error::invalid("token pool was built for a different corpus"));
    }
    let q = model.encode_query(query_ids)?;
    let hits = exec.map_range(q.len(), |j| pool.nearest(q.vector(j), k_token));
    let candidates: BTreeSet<usize> = hits.iter().flatten().map(|&(r, _)| pool.document_of(r)).collect();
    let candidates: Vec<usize> = candidates.into_iter().collect();
    let scores = exec.try_map(&candidates, |&doc| -> Result<(usize, f64)> {
        let d = pool.doc_matrix(doc)?;
        Ok((doc, model.score(&d, &q, Direction::QueryToDoc)?.value))
    })?;
    let mut ranked = rank_documents(corpus, scores);
    ranked.truncate(k_final);
    Ok(MvdrRetrieval { ranked, candidates })
}

//! Trie-constrained beam search for generative retrieval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::trie::NgramTrie;
use super::rank_documents;
use crate::encoding::TokenId;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::logsumexp;
use crate::model::{IdentifierDecoder, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
}

struct Beam {
    tokens: Vec<TokenId>,
    node: usize,
    log_score: f64,
}

/// Log-probabilities over the allowed tokens. Tokens the model scores at
/// negative infinity are dropped; if it rules out all of them the step is
/// uniform instead.
fn allowed_log_probs(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    if lse == f64::NEG_INFINITY || lse.is_nan() {
        let u = -(logits.len() as f64).ln();
        return vec![u; logits.len()];
    }
    logits.iter().map(|z| z - lse).collect()
}

fn by_score(a: &Span, b: &Span) -> std::cmp::Ordering {
    b.log_score.total_cmp(&a.log_score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search whose every step is restricted to trie continuations. A
/// hypothesis completes at `span_len` tokens or at a trie leaf. Completed
/// spans come back best first.
pub fn constrained_beam_search<D: IdentifierDecoder>(
    decoder: &D,
    state: &D::State,
    trie: &NgramTrie,
    beam: usize,
    span_len: usize,
    exec: Execution,
) -> Result<Vec<Span>> {
    if beam == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if span_len == 0 {
        return Err(Error::invalid("span length must be at least 1"));
    }
    let mut alive = vec![Beam { tokens: Vec::new(), node: NgramTrie::ROOT, log_score: 0.0 }];
    let mut done: Vec<Span> = Vec::new();
    while !alive.is_empty() {
        let expansions = exec.try_map(&alive, |b| -> Result<Vec<Beam>> {
            let children = trie.children(b.node);
            let candidates: Vec<TokenId> = children.iter().map(|c| c.0).collect();
            let logits = decoder.next_logits(state, &b.tokens, &candidates)?;
            let logp = allowed_log_probs(&logits);
            Ok(children
                .iter()
                .zip(logp)
                .filter(|(_, lp)| lp.is_finite())
                .map(|(&(t, node), lp)| {
                    let mut tokens = b.tokens.clone();
                    tokens.push(t);
                    Beam { tokens, node, log_score: b.log_score + lp }
                })
                .collect())
        })?;
        let mut next: Vec<Beam> = expansions.into_iter().flatten().collect();
        next.sort_by(|a, b| b.log_score.total_cmp(&a.log_score).then_with(|| a.tokens.cmp(&b.tokens)));
        next.truncate(beam);
        alive.clear();
        for b in next {
            if b.tokens.len() >= span_len || trie.is_leaf(b.node) {
                done.push(Span { tokens: b.tokens, log_score: b.log_score });
            } else {
                alive.push(b);
            }
        }
    }
    done.sort_by(by_score);
    Ok(done)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrRetrieval {
    /// `(document, score)` best first.
    pub ranked: Vec<(usize, f64)>,
    pub spans: Vec<Span>,
}

/// Each generated span credits every document containing it; a document's
/// score is the best log-score among its spans.
pub fn retrieve_gr<D: IdentifierDecoder>(
    decoder: &D,
    corpus: &Corpus,
    trie: &NgramTrie,
    query_ids: &[TokenId],
    beam: usize,
    span_len: usize,
    exec: Execution,
) -> Result<GrRetrieval> {
    let state = decoder.start(query_ids)?;
    let spans = constrained_beam_search(decoder, &state, trie, beam, span_len, exec)?;
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for s in &spans {
        for doc in trie.documents(&s.tokens, corpus.all_tokens()) {
            let e = best.entry(doc).or_insert(f64::NEG_INFINITY);
            *e = e.max(s.log_score);
        }
    }
    Ok(GrRetrieval { ranked: rank_documents(corpus, best.into_iter().collect()), spans })
}

/// [`retrieve_gr`] for any generative [`Model`].
pub fn retrieve_gr_model(
    model: &Model,
    corpus: &Corpus,
    trie: &NgramTrie,
    query_ids: &[TokenId],
    beam: usize,
    exec: Execution,
) -> Result<GrRetrieval> {
    let span_len = model.config().span_len;
    match model {
        Model::Gr(m) => retrieve_gr(m, corpus, trie, query_ids, beam, span_len, exec),
        Model::GrPawa(m) => retrieve_gr(m, corpus, trie, query_ids, beam, span_len, exec),
        Model::GrNp(m) => retrieve_gr(m, corpus, trie, query_ids, beam, span_len, exec),
        Model::Mvdr(_) => Err(Error::invalid("constrained decoding needs a generative model")),
    }
}

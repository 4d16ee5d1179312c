//! Corpus handling, BM25, both end-to-end retrieval procedures, reranking
//! and evaluation.

mod bm25;
mod corpus;
mod eval;
mod gr;
mod mvdr;
mod trie;

pub use bm25::{idf as bm25_idf, Bm25Index, B as BM25_B, K1 as BM25_K1};
pub use corpus::{
    read_jsonl, read_qrels, read_queries, read_run, write_jsonl, write_qrels, write_queries, write_run, Corpus,
    Document, Hit, Qrels, Query, Run,
};
pub use eval::{evaluate, rerank, rerank_candidates, to_hits, EvalReport, RERANK_DEPTH};
pub use gr::{constrained_beam_search, retrieve_gr, retrieve_gr_model, GrRetrieval, Span};
pub use mvdr::{retrieve_mvdr, MvdrRetrieval, TokenVectorPool};
pub use trie::{contains_span, NgramTrie, DEFAULT_DOC_CAP};

/// Sorts by descending score, ties by ascending document id.
pub(crate) fn rank_documents(corpus: &Corpus, mut scored: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| corpus.id(a.0).cmp(corpus.id(b.0))));
    scored
}

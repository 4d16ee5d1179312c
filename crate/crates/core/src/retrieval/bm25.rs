//! Okapi BM25 over an inverted index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::encoding::{TokenId, RESERVED};
use crate::error::{Error, Result};

pub const K1: f64 = 0.9;
pub const B: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    /// token -> (doc, term frequency), sorted by doc.
    postings: BTreeMap<TokenId, Vec<(usize, usize)>>,
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`, positive for every `df <= N`.
pub fn idf(docs: usize, df: usize) -> f64 {
    (1.0 + (docs as f64 - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
}

impl Bm25Index {
    pub fn build(corpus: &Corpus) -> Self {
        Self::with_params(corpus, K1, B)
    }

    pub fn with_params(corpus: &Corpus, k1: f64, b: f64) -> Self {
        let mut postings: BTreeMap<TokenId, Vec<(usize, usize)>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for (doc, tokens) in corpus.all_tokens().iter().enumerate() {
            doc_lens.push(tokens.len());
            let mut tf: BTreeMap<TokenId, usize> = BTreeMap::new();
            for &t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((doc, n));
            }
        }
        let avg_len = doc_lens.iter().sum::<usize>() as f64 / doc_lens.len().max(1) as f64;
        Self {
            k1,
            b,
            doc_ids: corpus.documents().iter().map(|d| d.id.clone()).collect(),
            doc_lens,
            avg_len,
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn document_frequency(&self, token: TokenId) -> usize {
        self.postings.get(&token).map_or(0, Vec::len)
    }

    fn term_weight(&self, tf: usize, len: usize) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * len as f64 / self.avg_len;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    /// Distinct query terms, reserved tokens dropped.
    fn terms(query: &[TokenId]) -> Vec<TokenId> {
        let mut t: Vec<TokenId> = query.iter().copied().filter(|&t| t >= RESERVED.len()).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn score(&self, doc: usize, query: &[TokenId]) -> f64 {
        Self::terms(query)
            .into_iter()
            .filter_map(|t| {
                let post = self.postings.get(&t)?;
                let k = post.binary_search_by_key(&doc, |p| p.0).ok()?;
                Some(idf(self.len(), post.len()) * self.term_weight(post[k].1, self.doc_lens[doc]))
            })
            .sum()
    }

    /// Documents sharing at least one term with the query, by descending
    /// score, ties broken by ascending document id.
    pub fn topk(&self, query: &[TokenId], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for t in Self::terms(query) {
            if let Some(post) = self.postings.get(&t) {
                let w = idf(self.len(), post.len());
                for &(doc, tf) in post {
                    *acc.entry(doc).or_default() += w * self.term_weight(tf, self.doc_lens[doc]);
                }
            }
        }
        let mut ranked: Vec<(usize, f64)> = acc.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0])));
        ranked.truncate(k);
        Ok(ranked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Vocab;
    use crate::retrieval::Document;
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> (Corpus, Vocab) {
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(k, t)| Document { id: format!("d{k}"), text: t.to_string() })
            .collect();
        let vocab = Corpus::build_vocab(&docs, 100);
        (Corpus::new(docs, &vocab).unwrap(), vocab)
    }

    #[test]
    fn single_document_formula() {
        let (c, v) = corpus(&["apple pear fig"]);
        let idx = Bm25Index::build(&c);
        let hits = idx.topk(&[v.id("pear").unwrap()], 5).unwrap();
        let expected = idf(1, 1) * (1.0 * (0.9 + 1.0)) / (1.0 + 0.9 * (1.0 - 0.4 + 0.4 * 1.0));
        assert_eq!(hits.len(), 1);
        assert!((hits[0].1 - expected).abs() < 1e-15);
        assert!((expected - (4.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn unknown_terms_give_nothing() {
        let (c, _) = corpus(&["apple pear", "fig"]);
        let idx = Bm25Index::build(&c);
        assert!(idx.topk(&[crate::encoding::UNK, 0], 3).unwrap().is_empty());
        assert!(idx.topk(&[5], 0).is_err());
    }

    #[test]
    fn containing_document_first() {
        let (c, v) = corpus(&["apple pear", "fig kiwi"]);
        let idx = Bm25Index::build(&c);
        let hits = idx.topk(&[v.id("kiwi").unwrap(), v.id("kiwi").unwrap()], 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 1);
        assert_eq!(idx.document_frequency(v.id("kiwi").unwrap()), 1);
    }

    #[test]
    fn ties_break_by_document_id() {
        let (c, v) = corpus(&["x y", "x y", "x y"]);
        let idx = Bm25Index::build(&c);
        let ids: Vec<usize> = idx.topk(&[v.id("x").unwrap()], 3).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn topk_agrees_with_score() {
        let (c, v) = corpus(&["a b c a", "b c", "c c c d", "e"]);
        let idx = Bm25Index::build(&c);
        let q = [v.id("a").unwrap(), v.id("c").unwrap()];
        for (doc, s) in idx.topk(&q, 10).unwrap() {
            assert!((s - idx.score(doc, &q)).abs() < 1e-12);
        }
        let json = serde_json::to_string(&idx).unwrap();
        assert_eq!(serde_json::from_str::<Bm25Index>(&json).unwrap(), idx);
    }

    proptest! {
        #[test]
        fn extra_occurrence_never_lowers_score(tf in 1usize..20, len in 1usize..50, avg in 1.0f64..40.0) {
            let idx = Bm25Index { k1: K1, b: B, doc_ids: vec![], doc_lens: vec![], avg_len: avg, postings: BTreeMap::new() };
            prop_assert!(idx.term_weight(tf + 1, len) >= idx.term_weight(tf, len));
        }
    }
}

//! Rerank protocol and ranking metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bm25::Bm25Index;
use super::corpus::{Corpus, Hit, Qrels, Run};
use super::rank_documents;
use crate::alignment::Direction;
use crate::encoding::TokenId;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Model;

pub const RERANK_DEPTH: usize = 100;

/// BM25 top-`depth` in rank order, followed by any ground-truth document
/// it missed.
pub fn rerank_candidates(bm25: &Bm25Index, query_ids: &[TokenId], truth: &[usize], depth: usize) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = bm25.topk(query_ids, depth)?.into_iter().map(|h| h.0).collect();
    for &t in truth {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Exact relevance of every candidate under the model, best first.
pub fn rerank(
    model: &Model,
    corpus: &Corpus,
    query_ids: &[TokenId],
    candidates: &[usize],
    direction: Direction,
    exec: Execution,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Empty("rerank candidates"));
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= corpus.len()) {
        return Err(Error::UnknownDocument(format!("document index {bad}")));
    }
    let q = model.encode_query(query_ids)?;
    let scored = exec.try_map(candidates, |&doc| -> Result<(usize, f64)> {
        Ok((doc, model.relevance(&q, doc, corpus.tokens(doc), direction)?.value))
    })?;
    Ok(rank_documents(corpus, scored))
}

pub fn to_hits(corpus: &Corpus, ranked: &[(usize, f64)]) -> Vec<Hit> {
    ranked.iter().map(|&(d, s)| Hit { doc: corpus.id(d).to_string(), score: s }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub mrr_at_10: f64,
    /// 1-based rank of the first relevant hit, `None` if absent.
    pub ranks: BTreeMap<String, Option<usize>>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "metric\tvalue\nqueries\t{}\nR@1\t{:.6}\nR@10\t{:.6}\nMRR@10\t{:.6}\n",
            self.queries, self.recall_at_1, self.recall_at_10, self.mrr_at_10
        )
    }
}

/// Every query in `run` must have judgments.
pub fn evaluate(run: &Run, qrels: &Qrels) -> Result<EvalReport> {
    if run.is_empty() {
        return Err(Error::Empty("run"));
    }
    let mut ranks = BTreeMap::new();
    let (mut r1, mut r10, mut mrr) = (0.0, 0.0, 0.0);
    for (qid, hits) in run {
        let relevant: &BTreeSet<String> = qrels
            .get(qid)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::MissingQrels(qid.clone()))?;
        let rank = hits.iter().position(|h| relevant.contains(&h.doc)).map(|p| p + 1);
        if let Some(r) = rank {
            if r == 1 {
                r1 += 1.0;
            }
            if r <= 10 {
                r10 += 1.0;
                mrr += 1.0 / r as f64;
            }
        }
        ranks.insert(qid.clone(), rank);
    }
    let n = run.len() as f64;
    Ok(EvalReport { queries: run.len(), recall_at_1: r1 / n, recall_at_10: r10 / n, mrr_at_10: mrr / n, ranks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_with_ranks(ranks: &[Option<usize>]) -> (Run, Qrels) {
        let mut run = Run::new();
        let mut qrels = Qrels::new();
        for (k, r) in ranks.iter().enumerate() {
            let qid = format!("q{k}");
            let hits = (1..=12)
                .map(|p| Hit { doc: if Some(p) == *r { "rel".into() } else { format!("x{p}") }, score: -(p as f64) })
                .collect();
            run.insert(qid.clone(), hits);
            qrels.insert(qid, ["rel".to_string()].into());
        }
        (run, qrels)
    }

    #[test]
    fn always_first() {
        let (run, qrels) = run_with_ranks(&[Some(1), Some(1)]);
        let e = evaluate(&run, &qrels).unwrap();
        assert_eq!((e.recall_at_1, e.recall_at_10, e.mrr_at_10), (1.0, 1.0, 1.0));
    }

    #[test]
    fn second_place() {
        let (run, qrels) = run_with_ranks(&[Some(2)]);
        let e = evaluate(&run, &qrels).unwrap();
        assert_eq!((e.recall_at_1, e.recall_at_10, e.mrr_at_10), (0.0, 1.0, 0.5));
    }

    #[test]
    fn mixed_ranks() {
        let (run, qrels) = run_with_ranks(&[Some(1), Some(3), Some(11)]);
        let e = evaluate(&run, &qrels).unwrap();
        assert_eq!(e.mrr_at_10, (1.0 + 1.0 / 3.0 + 0.0) / 3.0);
        assert_eq!(e.recall_at_10, 2.0 / 3.0);
        assert_eq!(e.ranks["q2"], Some(11));
        let (run, qrels) = run_with_ranks(&[None]);
        assert_eq!(evaluate(&run, &qrels).unwrap().ranks["q0"], None);
    }

    #[test]
    fn missing_judgments() {
        let (run, _) = run_with_ranks(&[Some(1)]);
        assert!(matches!(evaluate(&run, &Qrels::new()), Err(Error::MissingQrels(q)) if q == "q0"));
    }
}

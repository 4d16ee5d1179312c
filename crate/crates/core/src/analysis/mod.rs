//! Exact-match rates, low-rank diagnostics and heatmap export.

mod heatmap;
mod lowrank;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentMatrix, Direction, Strategy};
use crate::encoding::{TokenId, TokenMatrix, PAD};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{softmax_cols, softmax_rows, Matrix};
use crate::model::Model;
use crate::retrieval::Corpus;

pub use heatmap::{export_heatmap, write_pgm, HeatmapFiles, PGM_MID_GRAY};
pub use lowrank::{lowrank_instance, lowrank_scan, scaling_sweep, LowRankRecord, LowRankReport, SweepPoint};

pub const DEFAULT_BUCKETS: usize = 5;

/// Half-open IDF bins `[e_k, e_{k+1})`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfBuckets {
    pub edges: Vec<f64>,
}

impl IdfBuckets {
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bucket edges must be finite, strictly increasing and at least two"));
        }
        Ok(Self { edges })
    }

    /// `bins` equal-width bins over `[min, max]`. A degenerate range is
    /// widened by one on each side.
    pub fn equal_width(min: f64, max: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !min.is_finite() || !max.is_finite() || min > max {
            return Err(Error::invalid("need at least one bin over a finite range"));
        }
        let (lo, hi) = if min == max { (min - 1.0, max + 1.0) } else { (min, max) };
        let step = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|k| lo + step * k as f64).collect();
        edges.push(hi);
        Self::from_edges(edges)
    }

    /// Equal-width bins over the given IDF values.
    pub fn over(values: &[f64], bins: usize) -> Result<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Err(Error::Empty("idf values"));
        }
        Self::equal_width(min, max, bins)
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values outside the range clamp to the first or last bin.
    pub fn bucket(&self, idf: f64) -> usize {
        let k = self.edges.partition_point(|&e| e <= idf);
        k.saturating_sub(1).min(self.len() - 1)
    }
}

/// Everything needed to measure one (query, candidate) alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentInstance {
    pub doc_ids: Vec<TokenId>,
    pub query_ids: Vec<TokenId>,
    pub d: TokenMatrix,
    pub q: TokenMatrix,
    pub a: AlignmentMatrix,
}

impl AlignmentInstance {
    pub fn new(doc_ids: Vec<TokenId>, query_ids: Vec<TokenId>, d: TokenMatrix, q: TokenMatrix, a: AlignmentMatrix) -> Result<Self> {
        if d.len() != doc_ids.len() || q.len() != query_ids.len() || a.shape() != (d.len(), q.len()) {
            return Err(Error::ShapeMismatch { op: "alignment instance", left: a.shape(), right: (d.len(), q.len()) });
        }
        Ok(Self { doc_ids, query_ids, d, q, a })
    }

    /// Row-wise weights over query tokens: the alignment itself when it is
    /// already a row softmax, otherwise the row softmax of `D^T Q`.
    pub fn row_distribution(&self) -> Result<Matrix> {
        if self.a.strategy == Strategy::Attention {
            Ok(self.a.matrix.clone())
        } else {
            Ok(softmax_rows(&self.d.similarity(&self.q)?))
        }
    }

    /// `(match, non-match)` soft mass of each non-PAD document row.
    pub fn row_masses(&self) -> Result<Vec<(f64, f64)>> {
        let p = self.row_distribution()?;
        Ok((0..self.doc_ids.len())
            .filter(|&i| self.doc_ids[i] != PAD)
            .map(|i| {
                let (mut hit, mut miss) = (0.0, 0.0);
                for (j, &qt) in self.query_ids.iter().enumerate() {
                    if qt == self.doc_ids[i] {
                        hit += p.get(i, j);
                    } else {
                        miss += p.get(i, j);
                    }
                }
                (hit, miss)
            })
            .collect())
    }
}

/// Query or document tokens of the model's alignment for each candidate.
pub fn alignment_instances(
    model: &Model,
    corpus: &Corpus,
    query_ids: &[TokenId],
    candidates: &[usize],
    direction: Direction,
    exec: Execution,
) -> Result<Vec<AlignmentInstance>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    let q_ids = crate::model::clean_ids(query_ids, model.config().query_len, "query")?;
    let q = model.encode_query(&q_ids)?;
    exec.try_map(candidates, |&doc| {
        if doc >= corpus.len() {
            return Err(Error::UnknownDocument(format!("document index {doc}")));
        }
        let (ids, d, a) = model.alignment_parts(&q, doc, corpus.tokens(doc), direction)?;
        AlignmentInstance::new(ids, q_ids.clone(), d, q.clone(), a)
    })
}

/// Hard and soft match of one token, averaged over candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRate {
    pub token: TokenId,
    pub idf: f64,
    pub hard: f64,
    pub soft: f64,
}

fn first_max(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    values.enumerate().fold(None, |best, (k, v)| match best {
        Some((_, b)) if b >= v => best,
        _ => Some((k, v)),
    })
}

fn idf_of(idf: &[f64], token: TokenId) -> Result<f64> {
    idf.get(token).copied().ok_or(Error::TokenOutOfRange { id: token, size: idf.len() })
}

/// Per query token: hard = its top-1 aligned document token has the same id
/// (an all-zero column counts as a miss); soft = column-softmax mass of
/// `D^T Q` on same-id document tokens. Averaged over `instances`, which must
/// share one query.
pub fn token_rates_q2d(instances: &[AlignmentInstance], idf: &[f64]) -> Result<Vec<TokenRate>> {
    let first = instances.first().ok_or(Error::Empty("candidates"))?;
    if instances.iter().any(|x| x.query_ids != first.query_ids) {
        return Err(Error::invalid("instances must share one query"));
    }
    if first.query_ids.iter().all(|&t| t == PAD) {
        return Err(Error::Empty("query"));
    }
    let n = instances.len() as f64;
    let mut out = Vec::new();
    let softs = instances
        .iter()
        .map(|x| Ok(softmax_cols(&x.d.similarity(&x.q)?)))
        .collect::<Result<Vec<_>>>()?;
    for (j, &qt) in first.query_ids.iter().enumerate() {
        if qt == PAD {
            continue;
        }
        let (mut hard, mut soft) = (0.0, 0.0);
        for (x, s) in instances.iter().zip(&softs) {
            let col = (0..x.doc_ids.len()).map(|i| x.a.get(i, j));
            if let Some((i, v)) = first_max(col) {
                if v > 0.0 && x.doc_ids[i] == qt {
                    hard += 1.0;
                }
            }
            soft += (0..x.doc_ids.len()).filter(|&i| x.doc_ids[i] == qt).map(|i| s.get(i, j)).sum::<f64>();
        }
        out.push(TokenRate { token: qt, idf: idf_of(idf, qt)?, hard: hard / n, soft: soft / n });
    }
    Ok(out)
}

/// Mirror of [`token_rates_q2d`] over document tokens with row-wise
/// weights. Each document token is its own record.
pub fn token_rates_d2q(instances: &[AlignmentInstance], idf: &[f64]) -> Result<Vec<TokenRate>> {
    if instances.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    let mut out = Vec::new();
    for x in instances {
        if x.query_ids.iter().all(|&t| t == PAD) {
            return Err(Error::Empty("query"));
        }
        let masses = x.row_masses()?;
        let rows = (0..x.doc_ids.len()).filter(|&i| x.doc_ids[i] != PAD);
        for (i, (hit, _)) in rows.zip(masses) {
            let dt = x.doc_ids[i];
            let row = (0..x.query_ids.len()).map(|j| x.a.get(i, j));
            let hard = match first_max(row) {
                Some((j, v)) if v > 0.0 && x.query_ids[j] == dt => 1.0,
                _ => 0.0,
            };
            out.push(TokenRate { token: dt, idf: idf_of(idf, dt)?, hard, soft: hit });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub direction: Direction,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Mean per bucket; `None` for empty buckets.
    pub hard_rate: Vec<Option<f64>>,
    pub soft_rate: Vec<Option<f64>>,
    pub overall_hard: f64,
    pub overall_soft: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<TokenRate>>,
}

impl AlignmentReport {
    pub fn build(direction: Direction, buckets: &IdfBuckets, rates: &[TokenRate], keep_records: bool) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Empty("match records"));
        }
        let k = buckets.len();
        let mut counts = vec![0usize; k];
        let mut hard = vec![0.0; k];
        let mut soft = vec![0.0; k];
        for r in rates {
            let b = buckets.bucket(r.idf);
            counts[b] += 1;
            hard[b] += r.hard;
            soft[b] += r.soft;
        }
        let mean = |sums: &[f64]| -> Vec<Option<f64>> {
            sums.iter().zip(&counts).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect()
        };
        let n = rates.len() as f64;
        Ok(Self {
            direction,
            edges: buckets.edges.clone(),
            hard_rate: mean(&hard),
            soft_rate: mean(&soft),
            counts: counts.clone(),
            overall_hard: rates.iter().map(|r| r.hard).sum::<f64>() / n,
            overall_soft: rates.iter().map(|r| r.soft).sum::<f64>() / n,
            records: keep_records.then(|| rates.to_vec()),
        })
    }

    /// Aligned columns for reading in a terminal.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("direction: {:?}\n{:>22} {:>7} {:>8} {:>8}\n", self.direction, "idf range", "count", "hard", "soft");
        for b in 0..self.counts.len() {
            let range = format!("[{:.3}, {:.3}{}", self.edges[b], self.edges[b + 1], if b + 1 == self.counts.len() { "]" } else { ")" });
            s += &format!("{range:>22} {:>7} {:>8} {:>8}\n", self.counts[b], fmt(self.hard_rate[b]), fmt(self.soft_rate[b]));
        }
        s += &format!("{:>22} {:>7} {:>8.4} {:>8.4}\n", "all", self.counts.iter().sum::<usize>(), self.overall_hard, self.overall_soft);
        s
    }
}

/// Single-query q2d report over `candidates`.
pub fn match_rate_q2d(instances: &[AlignmentInstance], idf: &[f64], buckets: &IdfBuckets) -> Result<AlignmentReport> {
    AlignmentReport::build(Direction::QueryToDoc, buckets, &token_rates_q2d(instances, idf)?, false)
}

pub fn match_rate_d2q(instances: &[AlignmentInstance], idf: &[f64], buckets: &IdfBuckets) -> Result<AlignmentReport> {
    AlignmentReport::build(Direction::DocToQuery, buckets, &token_rates_d2q(instances, idf)?, false)
}

#[cfg(test)]
mod tests;

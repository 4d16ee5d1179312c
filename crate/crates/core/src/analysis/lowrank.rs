//! Distance of attention alignments from their best row-constant rank-one fit.

use serde::{Deserialize, Serialize};

use crate::alignment::align_attention;
use crate::encoding::{TokenId, TokenMatrix};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{row_constant_rank_one, Matrix};
use crate::model::Model;
use crate::relevance::decoder_states;
use crate::retrieval::Corpus;

/// `||A - R||_{(1,inf)} <= CEILING * ||W||_1` is the sanity bound checked per instance.
pub const CEILING: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankRecord {
    /// Entrywise l1 norm of `W`.
    pub w_l1: f64,
    pub residual_frobenius: f64,
    pub residual_one_inf: f64,
    pub a_frobenius: f64,
    pub relative_error: f64,
}

impl LowRankRecord {
    pub fn within_ceiling(&self) -> bool {
        self.residual_one_inf <= CEILING * self.w_l1
    }
}

fn record(a: &Matrix, w: &Matrix) -> LowRankRecord {
    let fit = row_constant_rank_one(a);
    let a_frobenius = a.frobenius_norm();
    LowRankRecord {
        w_l1: w.entrywise_l1(),
        residual_frobenius: fit.residual_frobenius,
        residual_one_inf: fit.residual_one_inf,
        a_frobenius,
        relative_error: if a_frobenius > 0.0 { fit.residual_frobenius / a_frobenius } else { 0.0 },
    }
}

/// Decoder states `states` attending over `q` through `w`.
pub fn lowrank_instance(states: &TokenMatrix, q: &TokenMatrix, w: &Matrix) -> Result<LowRankRecord> {
    Ok(record(&align_attention(states, q, w)?.matrix, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t: f64,
    pub residual_frobenius: f64,
    pub residual_one_inf: f64,
}

/// Residuals with `W` replaced by `t * W` on fixed inputs.
pub fn scaling_sweep(states: &TokenMatrix, q: &TokenMatrix, w: &Matrix, ts: &[f64]) -> Result<Vec<SweepPoint>> {
    ts.iter()
        .map(|&t| {
            let r = lowrank_instance(states, q, &w.scaled(t))?;
            Ok(SweepPoint { t, residual_frobenius: r.residual_frobenius, residual_one_inf: r.residual_one_inf })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankReport {
    pub records: Vec<LowRankRecord>,
    pub mean_relative_error: f64,
    pub median_relative_error: f64,
    pub max_relative_error: f64,
    /// Instances satisfying the `4 ||W||_1` ceiling.
    pub within_ceiling: usize,
}

impl LowRankReport {
    pub fn from_records(records: Vec<LowRankRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("low-rank instances"));
        }
        let mut rel: Vec<f64> = records.iter().map(|r| r.relative_error).collect();
        rel.sort_by(f64::total_cmp);
        let n = rel.len();
        let median = if n % 2 == 1 { rel[n / 2] } else { 0.5 * (rel[n / 2 - 1] + rel[n / 2]) };
        Ok(Self {
            mean_relative_error: rel.iter().sum::<f64>() / n as f64,
            median_relative_error: median,
            max_relative_error: rel[n - 1],
            within_ceiling: records.iter().filter(|r| r.within_ceiling()).count(),
            records,
        })
    }

    pub fn all_within_ceiling(&self) -> bool {
        self.within_ceiling == self.records.len()
    }

    pub fn to_text(&self) -> String {
        format!(
            "instances {}\nrelative error mean {:.6} median {:.6} max {:.6}\nwithin 4|W|_1 ceiling {}/{}\n",
            self.records.len(),
            self.mean_relative_error,
            self.median_relative_error,
            self.max_relative_error,
            self.within_ceiling,
            self.records.len()
        )
    }
}

/// One record per `(query ids, document index)` instance of a generative model.
pub fn lowrank_scan(model: &Model, corpus: &Corpus, instances: &[(Vec<TokenId>, usize)], exec: Execution) -> Result<LowRankReport> {
    let gr = model
        .generative()
        .ok_or_else(|| Error::invalid("low-rank diagnostics need a model with cross-attention"))?;
    let records = exec.try_map(instances, |(query, doc)| {
        if *doc >= corpus.len() {
            return Err(Error::UnknownDocument(format!("document index {doc}")));
        }
        let q = gr.encode_query(query)?;
        let states = decoder_states(&gr.identifier(corpus.tokens(*doc))?, &gr.params)?;
        lowrank_instance(&states, &q, &gr.params.w)
    })?;
    LowRankReport::from_records(records)
}

//! Alignment matrices: which (document token, query token) pairs contribute to
//! relevance, and with what weight. Rows index document positions, columns
//! index query positions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::{TokenId, TokenMatrix, PAD};
use crate::error::{Error, Result};
use crate::linalg::{softmax_masked, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Top1,
    Attention,
    ExactLexical,
    Salience,
    SingleVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    QueryToDoc,
    DocToQuery,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub matrix: Matrix,
    pub strategy: Strategy,
    pub direction: Direction,
    /// Normalizer; 1 unless [`AlignmentMatrix::normalized`] was applied.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    strategy: Strategy,
    direction: Direction,
    z: f64,
    rows: usize,
    cols: usize,
}

impl AlignmentMatrix {
    pub fn new(matrix: Matrix, strategy: Strategy, direction: Direction) -> Result<Self> {
        if let Some(&v) = matrix.as_slice().iter().find(|&&v| v < 0.0) {
            return Err(Error::invalid(format!("alignment entries must be nonnegative, found {v}")));
        }
        Ok(Self { matrix, strategy, direction, z: 1.0 })
    }

    /// Sets `Z` to the total alignment mass.
    pub fn normalized(mut self) -> Self {
        self.z = self.matrix.sum();
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    /// Writes the matrix as labelled CSV plus a `<path>.json` sidecar holding
    /// strategy, direction and `Z`. Values use 17 significant digits.
    pub fn write_csv(&self, path: &Path, doc_labels: &[String], query_labels: &[String]) -> Result<()> {
        let (m, n) = self.shape();
        if doc_labels.len() != m || query_labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "write_csv labels",
                left: (m, n),
                right: (doc_labels.len(), query_labels.len()),
            });
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        header.extend(query_labels.iter().cloned());
        w.write_record(&header)?;
        for (i, label) in doc_labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.matrix.row(i).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let sidecar = Sidecar { strategy: self.strategy, direction: self.direction, z: self.z, rows: m, cols: n };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Inverse of [`AlignmentMatrix::write_csv`].
    pub fn read_csv(path: &Path) -> Result<(Self, Vec<String>, Vec<String>)> {
        let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut records = r.records();
        let header = records.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
        let query_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut doc_labels = Vec::new();
        let mut rows = Vec::new();
        for (k, rec) in records.enumerate() {
            let rec = rec?;
            let line = k + 2;
            if rec.len() != query_labels.len() + 1 {
                return Err(parse_err(line, format!("expected {} fields, found {}", query_labels.len() + 1, rec.len())));
            }
            doc_labels.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| parse_err(line, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let matrix = Matrix::from_rows(&rows)?;
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut a = AlignmentMatrix::new(matrix, sidecar.strategy, sidecar.direction)?;
        a.z = sidecar.z;
        Ok((a, doc_labels, query_labels))
    }
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn all_true(n: usize) -> Vec<bool> {
    vec![true; n]
}

fn check_masks(d: &TokenMatrix, q: &TokenMatrix, d_mask: &[bool], q_mask: &[bool]) -> Result<()> {
    if d_mask.len() != d.len() || q_mask.len() != q.len() {
        return Err(Error::invalid("mask length differs from sequence length"));
    }
    if !q_mask.iter().any(|&m| m) {
        return Err(Error::Empty("query"));
    }
    if !d_mask.iter().any(|&m| m) {
        return Err(Error::Empty("document"));
    }
    Ok(())
}

/// Index of the first maximum among entries where `mask` is true.
fn first_argmax(values: impl Iterator<Item = f64>, mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.enumerate() {
        if mask[k] && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Each query token picks its most similar document token (MaxSim).
pub fn align_top1_q2d(d: &TokenMatrix, q: &TokenMatrix) -> Result<AlignmentMatrix> {
    align_top1_q2d_masked(d, q, &all_true(d.len()), &all_true(q.len()))
}

/// [`align_top1_q2d`] with padding masks; masked query columns stay zero.
pub fn align_top1_q2d_masked(
    d: &TokenMatrix,
    q: &TokenMatrix,
    d_mask: &[bool],
    q_mask: &[bool],
) -> Result<AlignmentMatrix> {
    check_masks(d, q, d_mask, q_mask)?;
    let sim = d.similarity(q)?;
    let mut a = Matrix::zeros(d.len(), q.len());
    for j in (0..q.len()).filter(|&j| q_mask[j]) {
        if let Some(i) = first_argmax((0..d.len()).map(|i| sim.get(i, j)), d_mask) {
            a.set(i, j, 1.0);
        }
    }
    AlignmentMatrix::new(a, Strategy::Top1, Direction::QueryToDoc)
}

/// Each document token picks its most similar query token.
pub fn align_top1_d2q(d: &TokenMatrix, q: &TokenMatrix) -> Result<AlignmentMatrix> {
    align_top1_d2q_masked(d, q, &all_true(d.len()), &all_true(q.len()))
}

pub fn align_top1_d2q_masked(
    d: &TokenMatrix,
    q: &TokenMatrix,
    d_mask: &[bool],
    q_mask: &[bool],
) -> Result<AlignmentMatrix> {
    check_masks(d, q, d_mask, q_mask)?;
    let sim = d.similarity(q)?;
    let mut a = Matrix::zeros(d.len(), q.len());
    for i in (0..d.len()).filter(|&i| d_mask[i]) {
        if let Some(j) = first_argmax(sim.row(i).iter().copied(), q_mask) {
            a.set(i, j, 1.0);
        }
    }
    AlignmentMatrix::new(a, Strategy::Top1, Direction::DocToQuery)
}

/// Cross-attention alignment: row `i` is the softmax over query positions of
/// `(W d_i) . q_j`, where `d_i` is the decoder state fed at step `i`.
pub fn align_attention(shifted: &TokenMatrix, q: &TokenMatrix, w: &Matrix) -> Result<AlignmentMatrix> {
    align_attention_masked(shifted, q, &all_true(q.len()), w)
}

pub fn align_attention_masked(
    shifted: &TokenMatrix,
    q: &TokenMatrix,
    q_mask: &[bool],
    w: &Matrix,
) -> Result<AlignmentMatrix> {
    let logits = attention_logits(shifted, q, w)?;
    if q_mask.len() != q.len() {
        return Err(Error::invalid("mask length differs from sequence length"));
    }
    if !q_mask.iter().any(|&m| m) {
        return Err(Error::Empty("query"));
    }
    let mut a = Matrix::zeros(shifted.len(), q.len());
    for i in 0..shifted.len() {
        a.row_mut(i).copy_from_slice(&softmax_masked(logits.row(i), Some(q_mask)));
    }
    AlignmentMatrix::new(a, Strategy::Attention, Direction::DocToQuery)
}

/// `S[i, j] = (W d_i) . q_j`, the pre-softmax cross-attention scores.
pub fn attention_logits(shifted: &TokenMatrix, q: &TokenMatrix, w: &Matrix) -> Result<Matrix> {
    let d = shifted.dim();
    if w.shape() != (d, d) || q.dim() != d {
        return Err(Error::ShapeMismatch { op: "align_attention", left: w.shape(), right: (q.dim(), d) });
    }
    shifted.map_linear(w)?.similarity(q)
}

/// `A[i, j] = 1` iff the token ids match and neither is padding.
pub fn align_exact_lexical(doc_ids: &[TokenId], query_ids: &[TokenId]) -> Result<AlignmentMatrix> {
    if doc_ids.is_empty() || query_ids.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let a = Matrix::from_fn(doc_ids.len(), query_ids.len(), |i, j| {
        let (d, q) = (doc_ids[i], query_ids[j]);
        if d == q && d != PAD { 1.0 } else { 0.0 }
    })?;
    AlignmentMatrix::new(a, Strategy::ExactLexical, Direction::Symmetric)
}

/// `A = pairwise ⊙ u_d u_q^T`.
pub fn align_salience(pairwise: &AlignmentMatrix, u_d: &[f64], u_q: &[f64]) -> Result<AlignmentMatrix> {
    let (m, n) = pairwise.shape();
    if u_d.len() != m || u_q.len() != n {
        return Err(Error::ShapeMismatch { op: "align_salience", left: (m, n), right: (u_d.len(), u_q.len()) });
    }
    if let Some(&v) = u_d.iter().chain(u_q).find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::NegativeSalience(v));
    }
    let a = Matrix::from_fn(m, n, |i, j| pairwise.get(i, j) * u_d[i] * u_q[j])?;
    AlignmentMatrix::new(a, Strategy::Salience, pairwise.direction)
}

/// Single nonzero at `(cls_doc, cls_query)`.
pub fn align_single_vector(m: usize, n: usize, cls_doc: usize, cls_query: usize) -> Result<AlignmentMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::Empty("alignment shape"));
    }
    if cls_doc >= m || cls_query >= n {
        return Err(Error::invalid(format!("cell ({cls_doc}, {cls_query}) outside {m}x{n}")));
    }
    let mut a = Matrix::zeros(m, n);
    a.set(cls_doc, cls_query, 1.0);
    AlignmentMatrix::new(a, Strategy::SingleVector, Direction::Symmetric)
}

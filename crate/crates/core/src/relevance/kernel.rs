//! Kernelized relevance with feature map `phi = elu + 1` and `F(x) = x phi(x)^T`.

use serde::{Deserialize, Serialize};

use crate::encoding::TokenMatrix;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// `x + 1` for `x > 0`, `exp(x)` otherwise; strictly positive.
pub fn elu_plus_one(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v + 1.0 } else { v.exp() }).collect()
}

/// `F(x) = x phi(x)^T` as an explicit `d x d` matrix.
pub fn feature_map(x: &[f64]) -> Matrix {
    let phi = elu_plus_one(x);
    let mut f = Matrix::zeros(x.len(), x.len());
    for (r, &xr) in x.iter().enumerate() {
        for (c, &pc) in phi.iter().enumerate() {
            f.set(r, c, xr * pc);
        }
    }
    f
}

/// `tr(F(d)^T F(q))` evaluated from the explicit matrices, and the
/// factorized form `(d . q)(phi(d) . phi(q))`.
pub fn trace_pair(d: &[f64], q: &[f64]) -> (f64, f64) {
    let explicit = dot(feature_map(d).as_slice(), feature_map(q).as_slice());
    let factorized = dot(d, q) * dot(&elu_plus_one(d), &elu_plus_one(q));
    (explicit, factorized)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub explicit: f64,
    pub factorized: f64,
    /// `sqrt(tr(F(d)^T F(d))) * sqrt(tr(F(q)^T F(q)))`.
    pub bound: f64,
    pub bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelizedRelevance {
    /// `sum_ij tr(F(d_i)^T F(q_j)) / p_i`, with `p_i = sum_j' phi(d_i) . phi(q_j')`.
    pub value: f64,
    /// Row-major over `(i, j)`.
    pub pairs: Vec<PairCheck>,
}

impl KernelizedRelevance {
    pub fn all_bounds_hold(&self) -> bool {
        self.pairs.iter().all(|p| p.bound_holds)
    }

    pub fn max_identity_gap(&self) -> f64 {
        self.pairs.iter().map(|p| (p.explicit - p.factorized).abs()).fold(0.0, f64::max)
    }
}

/// Relative slack for rounding in the Cauchy–Schwarz comparison; equality is
/// attained when `d` and `q` are parallel.
const BOUND_SLACK: f64 = 1e-12;

pub fn rel_kernelized(d: &TokenMatrix, q: &TokenMatrix) -> Result<KernelizedRelevance> {
    if d.dim() != q.dim() {
        return Err(Error::ShapeMismatch { op: "rel_kernelized", left: (d.len(), d.dim()), right: (q.len(), q.dim()) });
    }
    let fd: Vec<Matrix> = (0..d.len()).map(|i| feature_map(d.vector(i))).collect();
    let fq: Vec<Matrix> = (0..q.len()).map(|j| feature_map(q.vector(j))).collect();
    let phi_d: Vec<Vec<f64>> = (0..d.len()).map(|i| elu_plus_one(d.vector(i))).collect();
    let phi_q: Vec<Vec<f64>> = (0..q.len()).map(|j| elu_plus_one(q.vector(j))).collect();
    let norm_d: Vec<f64> = fd.iter().map(|f| f.frobenius_norm()).collect();
    let norm_q: Vec<f64> = fq.iter().map(|f| f.frobenius_norm()).collect();
    let mut value = 0.0;
    let mut pairs = Vec::with_capacity(d.len() * q.len());
    for i in 0..d.len() {
        let p: f64 = phi_q.iter().map(|pq| dot(&phi_d[i], pq)).sum();
        if p.is_nan() || p <= 0.0 {
            return Err(Error::invalid("kernel normalizer is zero"));
        }
        for j in 0..q.len() {
            let explicit = dot(fd[i].as_slice(), fq[j].as_slice());
            let factorized = dot(d.vector(i), q.vector(j)) * dot(&phi_d[i], &phi_q[j]);
            let bound = norm_d[i] * norm_q[j];
            pairs.push(PairCheck {
                explicit,
                factorized,
                bound,
                bound_holds: explicit <= bound * (1.0 + BOUND_SLACK),
            });
            value += explicit / p;
        }
    }
    Ok(KernelizedRelevance { value, pairs })
}

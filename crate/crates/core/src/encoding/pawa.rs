//! Prefix-aware weight-adaptive document encoding.
//!
//! Instead of one static embedding per token, every (position, token) pair
//! owns a `d x d` projection. The effective embedding of token `v` at position
//! `i` is `E[i, v] * latent_i`, where `latent_i` summarises the prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{uniform_matrix, TokenMatrix};
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Dense projection bank, stored as `(positions * vocab * dim) x dim`:
/// the `d x d` block for `(i, v)` starts at row `(i * vocab + v) * dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PawaBank {
    positions: usize,
    vocab_size: usize,
    dim: usize,
    data: Matrix,
}

impl PawaBank {
    pub fn identity(positions: usize, vocab_size: usize, dim: usize) -> Self {
        let mut data = Matrix::zeros(positions * vocab_size * dim, dim);
        for block in 0..positions * vocab_size {
            for t in 0..dim {
                data.set(block * dim + t, t, 1.0);
            }
        }
        Self { positions, vocab_size, dim, data }
    }

    pub fn random(positions: usize, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let data = uniform_matrix(positions * vocab_size * dim, dim, rng);
        Self { positions, vocab_size, dim, data }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn block_start(&self, position: usize, token: TokenId) -> Result<usize> {
        if position >= self.positions {
            return Err(Error::PositionOutOfRange { position, len: self.positions });
        }
        if token >= self.vocab_size {
            return Err(Error::TokenOutOfRange { id: token, size: self.vocab_size });
        }
        Ok((position * self.vocab_size + token) * self.dim)
    }

    /// Row `r` of the projection `E[position, token]`.
    pub fn projection_row(&self, position: usize, token: TokenId, r: usize) -> Result<&[f64]> {
        Ok(self.data.row(self.block_start(position, token)? + r))
    }

    /// `E[position, token]` as its own matrix.
    pub fn projection(&self, position: usize, token: TokenId) -> Result<Matrix> {
        let start = self.block_start(position, token)?;
        let mut m = Matrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            m.row_mut(r).copy_from_slice(self.data.row(start + r));
        }
        Ok(m)
    }

    pub fn set_projection(&mut self, position: usize, token: TokenId, m: &Matrix) -> Result<()> {
        if m.shape() != (self.dim, self.dim) {
            return Err(Error::ShapeMismatch {
                op: "set_projection",
                left: m.shape(),
                right: (self.dim, self.dim),
            });
        }
        let start = self.block_start(position, token)?;
        for r in 0..self.dim {
            self.data.row_mut(start + r).copy_from_slice(m.row(r));
        }
        Ok(())
    }

    /// `E[position, token] * latent`.
    pub fn project(&self, position: usize, token: TokenId, latent: &[f64]) -> Result<Vec<f64>> {
        let start = self.block_start(position, token)?;
        if latent.len() != self.dim {
            return Err(Error::invalid("latent dimension differs from bank dimension"));
        }
        Ok((0..self.dim).map(|r| dot(self.data.row(start + r), latent)).collect())
    }

    /// `E[position, token]^T * h`.
    pub(crate) fn project_transposed(
        &self,
        position: usize,
        token: TokenId,
        h: &[f64],
    ) -> Result<Vec<f64>> {
        let start = self.block_start(position, token)?;
        let mut out = vec![0.0; self.dim];
        for (r, &hr) in h.iter().enumerate() {
            crate::linalg::axpy(&mut out, hr, self.data.row(start + r));
        }
        Ok(out)
    }

    /// Accumulates `scale * h latent^T` into the block for `(position, token)`.
    pub(crate) fn accumulate_outer(
        &mut self,
        position: usize,
        token: TokenId,
        scale: f64,
        h: &[f64],
        latent: &[f64],
    ) -> Result<()> {
        let start = self.block_start(position, token)?;
        for (r, &hr) in h.iter().enumerate() {
            crate::linalg::axpy(self.data.row_mut(start + r), scale * hr, latent);
        }
        Ok(())
    }

    pub fn weights(&self) -> &Matrix {
        &self.data
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.data
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            positions: self.positions,
            vocab_size: self.vocab_size,
            dim: self.dim,
            data: Matrix::zeros(self.data.rows(), self.dim),
        }
    }
}

/// Effective per-position embeddings `e_i = E[i, ids[i]] * latents_i`.
pub fn pawa_encode(ids: &[TokenId], bank: &PawaBank, latents: &TokenMatrix) -> Result<TokenMatrix> {
    if ids.len() != latents.len() {
        return Err(Error::invalid(format!(
            "{} ids but {} latent vectors",
            ids.len(),
            latents.len()
        )));
    }
    let rows = ids
        .iter()
        .enumerate()
        .map(|(i, &v)| bank.project(i, v, latents.vector(i)))
        .collect::<Result<Vec<_>>>()?;
    TokenMatrix::from_vectors(&rows)
}

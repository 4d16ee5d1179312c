use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Token vectors of one sequence. Row `i` is the vector of token `i`, so the
/// backing matrix is `len x dim` (the transpose of the column-per-token form).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenMatrix(Matrix);

impl TokenMatrix {
    pub fn new(rows: Matrix) -> Self {
        Self(rows)
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        Matrix::from_rows(vectors).map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn vector(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn vector_mut(&mut self, i: usize) -> &mut [f64] {
        self.0.row_mut(i)
    }

    pub fn rows(&self) -> &Matrix {
        &self.0
    }

    pub fn into_rows(self) -> Matrix {
        self.0
    }

    /// Pairwise dot products `D^T Q`: entry `(i, j)` is `d_i . q_j`.
    pub fn similarity(&self, other: &TokenMatrix) -> Result<Matrix> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                op: "similarity",
                left: self.0.shape(),
                right: other.0.shape(),
            });
        }
        self.0.matmul_nt(&other.0)
    }

    /// Applies `x -> M x` to every token vector.
    pub fn map_linear(&self, m: &Matrix) -> Result<TokenMatrix> {
        self.0.matmul_nt(m).map(TokenMatrix)
    }
}

/// One d-vector per vocabulary entry, stored as a `vocab x dim` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingTable(Matrix);

impl EmbeddingTable {
    pub fn new(weights: Matrix) -> Self {
        Self(weights)
    }

    /// Uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self(uniform_matrix(vocab_size, dim, rng))
    }

    /// Row `v` is the basis vector `e_v`; dimension equals vocabulary size.
    pub fn one_hot(vocab_size: usize) -> Self {
        Self(Matrix::identity(vocab_size))
    }

    pub fn vocab_size(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn vector(&self, id: TokenId) -> Result<&[f64]> {
        if id >= self.vocab_size() {
            return Err(Error::TokenOutOfRange { id, size: self.vocab_size() });
        }
        Ok(self.0.row(id))
    }

    pub fn weights(&self) -> &Matrix {
        &self.0
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }
}

pub(crate) fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    m.as_mut_slice()
        .iter_mut()
        .for_each(|x| *x = rng.random_range(-bound..=bound));
    m
}

/// Token ids with their vectors and a real-token mask (false at PAD).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub ids: Vec<TokenId>,
    pub vectors: TokenMatrix,
    pub mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn new(ids: Vec<TokenId>, vectors: TokenMatrix) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::invalid(format!(
                "{} ids but {} token vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let mask = ids.iter().map(|&id| id != PAD).collect();
        Ok(Self { ids, vectors, mask })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Static lookup: vector `i` is the table row of `ids[i]`.
pub fn embed_static(ids: &[TokenId], table: &EmbeddingTable) -> Result<EncodedSequence> {
    if ids.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let mut m = Matrix::zeros(ids.len(), table.dim());
    for (i, &id) in ids.iter().enumerate() {
        m.row_mut(i).copy_from_slice(table.vector(id)?);
    }
    EncodedSequence::new(ids.to_vec(), TokenMatrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_lookup_is_basis_vector() {
        let t = EmbeddingTable::one_hot(6);
        let e = embed_static(&[2], &t).unwrap();
        assert_eq!(e.vectors.vector(0), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_and_random_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = EmbeddingTable::random(8, 4, &mut rng);
        let e = embed_static(&[5, 5], &t).unwrap();
        assert_eq!(e.vectors.vector(0), e.vectors.vector(1));
        let e = embed_static(&[3, 1], &t).unwrap();
        assert_eq!(e.vectors.vector(0), t.weights().row(3));
        assert_eq!(e.vectors.vector(1), t.weights().row(1));
        assert!(matches!(
            embed_static(&[8], &t),
            Err(Error::TokenOutOfRange { id: 8, size: 8 })
        ));
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTable::random(50, 16, &mut rng);
        assert!(t.weights().as_slice().iter().all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn mask_flags_padding() {
        let t = EmbeddingTable::one_hot(6);
        let e = embed_static(&[5, PAD, 3, PAD], &t).unwrap();
        assert_eq!(e.mask, vec![true, false, true, false]);
        assert_eq!(e.real_len(), 2);
    }

    #[test]
    fn lookup_linearity_against_uniform_alignment() {
        // sum_ij e_i . q_j * (1/N) == sum_i e_i . mean_j q_j
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = EmbeddingTable::random(10, 3, &mut rng);
        let e = embed_static(&[7, 2, 9], &t).unwrap();
        let q = TokenMatrix::new(uniform_matrix(4, 3, &mut rng));
        let a = Matrix::filled(3, 4, 0.25);
        let lhs = crate::linalg::hadamard_sum(&e.vectors.similarity(&q).unwrap(), &a).unwrap();
        let mut mean = vec![0.0; 3];
        for j in 0..4 {
            crate::linalg::axpy(&mut mean, 0.25, q.vector(j));
        }
        let rhs: f64 = (0..3).map(|i| dot(e.vectors.vector(i), &mean)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

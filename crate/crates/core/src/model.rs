//! Toy models for each paradigm, sharing one embedding table per model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    align_attention, align_top1_d2q, align_top1_q2d, AlignmentMatrix, Direction,
};
use crate::encoding::{
    embed_static, encode_causal, encode_contextual, pawa_encode, uniform_matrix, ContextualStore,
    EmbeddingTable, PawaBank, SelfAttention, TokenId, TokenMatrix, BOS, PAD,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, logsumexp, softmax_cols, softmax_masked, Matrix};
use crate::relevance::{decoder_states, rel_gr, rel_np, rel_pawa, rel_unified, DecoderParams, RelevanceScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    Mvdr,
    Gr,
    GrPawa,
    GrNp,
}

impl Paradigm {
    pub fn is_generative(self) -> bool {
        self != Paradigm::Mvdr
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown paradigm `{s}` (expected mvdr, gr, gr-pawa or gr-np)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Including the reserved tokens.
    pub vocab_size: usize,
    pub dim: usize,
    /// Identifier length for the generative paradigms.
    pub span_len: usize,
    pub query_len: usize,
    pub doc_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vocab_size <= BOS || self.span_len == 0 || self.query_len == 0 || self.doc_len == 0 {
            return Err(Error::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Drops padding and truncates to `max_len`.
pub fn clean_ids(ids: &[TokenId], max_len: usize, what: &'static str) -> Result<Vec<TokenId>> {
    let out: Vec<TokenId> = ids.iter().copied().filter(|&t| t != PAD).take(max_len).collect();
    if out.is_empty() {
        return Err(Error::Empty(what));
    }
    Ok(out)
}

/// Multi-vector dense retrieval: one shared contextual encoder for queries
/// and documents, scored with a top-1 alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvdrModel {
    pub config: ModelConfig,
    pub table: EmbeddingTable,
    pub encoder: SelfAttention,
}

impl MvdrModel {
    pub fn random(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let table = EmbeddingTable::random(config.vocab_size, config.dim, rng);
        let encoder = SelfAttention::random(config.dim, rng);
        Ok(Self { config, table, encoder })
    }

    pub fn encode_query(&self, ids: &[TokenId]) -> Result<TokenMatrix> {
        let ids = clean_ids(ids, self.config.query_len, "query")?;
        Ok(encode_contextual(&ids, &self.table, &self.encoder)?.vectors)
    }

    pub fn doc_tokens(&self, ids: &[TokenId]) -> Result<Vec<TokenId>> {
        clean_ids(ids, self.config.doc_len, "document")
    }

    pub fn encode_doc(&self, ids: &[TokenId]) -> Result<TokenMatrix> {
        Ok(encode_contextual(&self.doc_tokens(ids)?, &self.table, &self.encoder)?.vectors)
    }

    pub fn score(&self, d: &TokenMatrix, q: &TokenMatrix, direction: Direction) -> Result<RelevanceScore> {
        rel_unified(d, q, &top1(d, q, direction)?)
    }
}

pub(crate) fn top1(d: &TokenMatrix, q: &TokenMatrix, direction: Direction) -> Result<AlignmentMatrix> {
    match direction {
        Direction::DocToQuery => align_top1_d2q(d, q),
        _ => align_top1_q2d(d, q),
    }
}

/// Generative retrieval with a single cross-attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrModel {
    pub config: ModelConfig,
    pub encoder: SelfAttention,
    pub params: DecoderParams,
}

impl GrModel {
    pub fn random(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let table = EmbeddingTable::random(config.vocab_size, d, rng);
        let encoder = SelfAttention::random(d, rng);
        let decoder = SelfAttention::random(d, rng);
        let w = uniform_matrix(d, d, rng);
        let w_v = uniform_matrix(d, d, rng);
        let params = DecoderParams::new(table, decoder, w, w_v)?;
        Ok(Self { config, encoder, params })
    }

    pub fn encode_query(&self, ids: &[TokenId]) -> Result<TokenMatrix> {
        let ids = clean_ids(ids, self.config.query_len, "query")?;
        Ok(encode_contextual(&ids, &self.params.table, &self.encoder)?.vectors)
    }

    /// The document's first `span_len` tokens.
    pub fn identifier(&self, doc: &[TokenId]) -> Result<Vec<TokenId>> {
        clean_ids(doc, self.config.span_len, "document identifier")
    }

    /// Decoder state for the next step after `prefix`, attention weights
    /// over query tokens and the attended context `Q alpha`.
    fn step(&self, q: &TokenMatrix, prefix: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut shifted = Vec::with_capacity(prefix.len() + 1);
        shifted.push(BOS);
        shifted.extend_from_slice(prefix);
        let states = encode_causal(&shifted, &self.params.table, &self.params.decoder)?.vectors;
        let s = states.vector(prefix.len()).to_vec();
        let ws = self.params.w.mul_vec(&s)?;
        let logits: Vec<f64> = (0..q.len()).map(|j| dot(&ws, q.vector(j))).collect();
        let alpha = softmax_masked(&logits, None);
        let mut context = vec![0.0; q.dim()];
        for (j, &a) in alpha.iter().enumerate() {
            crate::linalg::axpy(&mut context, a, q.vector(j));
        }
        Ok((s, context))
    }
}

/// GR with prefix-aware projections replacing the static output table.
/// Latents are the decoder states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PawaModel {
    pub gr: GrModel,
    pub bank: PawaBank,
}

impl PawaModel {
    pub fn random(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let gr = GrModel::random(config, rng)?;
        let c = &gr.config;
        let bank = PawaBank::random(c.span_len, c.vocab_size, c.dim, rng);
        Ok(Self { gr, bank })
    }
}

/// GR whose output table is a store of contextual identifier-token vectors
/// produced by the query encoder. `W_V` stays at the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpModel {
    pub gr: GrModel,
    pub store: ContextualStore,
}

impl NpModel {
    pub fn random(config: ModelConfig, docs: &[Vec<TokenId>], rng: &mut impl Rng) -> Result<Self> {
        let mut gr = GrModel::random(config, rng)?;
        gr.params.w_v = Matrix::identity(gr.config.dim);
        let store = Self::encode_store(&gr, docs)?;
        Ok(Self { gr, store })
    }

    pub fn encode_store(gr: &GrModel, docs: &[Vec<TokenId>]) -> Result<ContextualStore> {
        let idents = docs.iter().map(|d| gr.identifier(d)).collect::<Result<Vec<_>>>()?;
        ContextualStore::build(&idents, Self::store_encoder(gr))
    }

    pub fn store_encoder(gr: &GrModel) -> impl Fn(&[TokenId]) -> Result<TokenMatrix> + '_ {
        move |ids| Ok(encode_contextual(ids, &gr.params.table, &gr.encoder)?.vectors)
    }

    /// Flattened store: `(vectors, token id per row, row offset per document)`.
    pub fn pool(&self) -> Result<(Matrix, Vec<TokenId>, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        let mut offsets = Vec::with_capacity(self.store.len());
        for doc in self.store.documents() {
            offsets.push(ids.len());
            for (i, &t) in doc.ids.iter().enumerate() {
                rows.push(doc.vectors.vector(i).to_vec());
                ids.push(t);
            }
        }
        if rows.is_empty() {
            return Err(Error::Empty("contextual store"));
        }
        Ok((Matrix::from_rows(&rows)?, ids, offsets))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "paradigm", rename_all = "kebab-case")]
pub enum Model {
    Mvdr(MvdrModel),
    Gr(GrModel),
    GrPawa(PawaModel),
    GrNp(NpModel),
}

impl Model {
    /// `docs` are only consulted by the nonparametric variant, whose output
    /// table is built from them.
    pub fn random(paradigm: Paradigm, config: ModelConfig, docs: &[Vec<TokenId>], rng: &mut impl Rng) -> Result<Self> {
        Ok(match paradigm {
            Paradigm::Mvdr => Model::Mvdr(MvdrModel::random(config, rng)?),
            Paradigm::Gr => Model::Gr(GrModel::random(config, rng)?),
            Paradigm::GrPawa => Model::GrPawa(PawaModel::random(config, rng)?),
            Paradigm::GrNp => Model::GrNp(NpModel::random(config, docs, rng)?),
        })
    }

    pub fn paradigm(&self) -> Paradigm {
        match self {
            Model::Mvdr(_) => Paradigm::Mvdr,
            Model::Gr(_) => Paradigm::Gr,
            Model::GrPawa(_) => Paradigm::GrPawa,
            Model::GrNp(_) => Paradigm::GrNp,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Mvdr(m) => &m.config,
            Model::Gr(m) => &m.config,
            Model::GrPawa(m) => &m.gr.config,
            Model::GrNp(m) => &m.gr.config,
        }
    }

    pub fn generative(&self) -> Option<&GrModel> {
        match self {
            Model::Mvdr(_) => None,
            Model::Gr(m) => Some(m),
            Model::GrPawa(m) => Some(&m.gr),
            Model::GrNp(m) => Some(&m.gr),
        }
    }

    pub fn encode_query(&self, ids: &[TokenId]) -> Result<TokenMatrix> {
        match self {
            Model::Mvdr(m) => m.encode_query(ids),
            _ => self.generative().expect("generative").encode_query(ids),
        }
    }

    /// Exact relevance of document `doc` (index into the corpus, token ids
    /// `doc_ids`). `direction` selects the top-1 alignment for MVDR and is
    /// ignored by the generative paradigms, whose alignment is cross-attention.
    pub fn relevance(&self, q: &TokenMatrix, doc: usize, doc_ids: &[TokenId], direction: Direction) -> Result<RelevanceScore> {
        match self {
            Model::Mvdr(m) => m.score(&m.encode_doc(doc_ids)?, q, direction),
            Model::Gr(m) => rel_gr(&m.identifier(doc_ids)?, q, &m.params),
            Model::GrPawa(m) => {
                let ident = m.gr.identifier(doc_ids)?;
                let latents = decoder_states(&ident, &m.gr.params)?;
                rel_pawa(&ident, q, &m.gr.params, &m.bank, &latents)
            }
            Model::GrNp(m) => rel_np(doc, q, &m.store, &m.gr.params),
        }
    }

    /// Document-side token ids, token matrix, and alignment as scored by
    /// [`Model::relevance`], plus the similarity matrix `D^T Q`.
    pub fn alignment_parts(
        &self,
        q: &TokenMatrix,
        doc: usize,
        doc_ids: &[TokenId],
        direction: Direction,
    ) -> Result<(Vec<TokenId>, TokenMatrix, AlignmentMatrix)> {
        match self {
            Model::Mvdr(m) => {
                let ids = m.doc_tokens(doc_ids)?;
                let d = encode_contextual(&ids, &m.table, &m.encoder)?.vectors;
                let a = top1(&d, q, direction)?;
                Ok((ids, d, a))
            }
            _ => {
                let gr = self.generative().expect("generative");
                let (ids, d) = match self {
                    Model::GrNp(m) => {
                        let s = m.store.document(doc)?;
                        (s.ids.clone(), s.vectors.clone())
                    }
                    Model::GrPawa(m) => {
                        let ids = gr.identifier(doc_ids)?;
                        let latents = decoder_states(&ids, &gr.params)?;
                        let e = pawa_encode(&ids, &m.bank, &latents)?.map_linear(&gr.params.w_v.transpose())?;
                        (ids, e)
                    }
                    _ => {
                        let ids = gr.identifier(doc_ids)?;
                        let e = embed_static(&ids, &gr.params.table)?.vectors.map_linear(&gr.params.w_v.transpose())?;
                        (ids, e)
                    }
                };
                let states = decoder_states(&ids, &gr.params)?;
                let a = align_attention(&states, q, &gr.params.w)?;
                Ok((ids, d, a))
            }
        }
    }
}

/// Next-token scoring for constrained decoding.
pub trait IdentifierDecoder: Sync {
    type State: Sync;

    fn start(&self, query_ids: &[TokenId]) -> Result<Self::State>;

    /// Logits for each of `candidates` following `prefix`. A candidate the
    /// model cannot emit gets negative infinity.
    fn next_logits(&self, state: &Self::State, prefix: &[TokenId], candidates: &[TokenId]) -> Result<Vec<f64>>;
}

impl IdentifierDecoder for GrModel {
    type State = TokenMatrix;

    fn start(&self, query_ids: &[TokenId]) -> Result<TokenMatrix> {
        self.encode_query(query_ids)
    }

    fn next_logits(&self, q: &TokenMatrix, prefix: &[TokenId], candidates: &[TokenId]) -> Result<Vec<f64>> {
        let (_, context) = self.step(q, prefix)?;
        let h = self.params.w_v.mul_vec(&context)?;
        candidates.iter().map(|&v| Ok(dot(self.params.table.vector(v)?, &h))).collect()
    }
}

impl IdentifierDecoder for PawaModel {
    type State = TokenMatrix;

    fn start(&self, query_ids: &[TokenId]) -> Result<TokenMatrix> {
        self.gr.encode_query(query_ids)
    }

    fn next_logits(&self, q: &TokenMatrix, prefix: &[TokenId], candidates: &[TokenId]) -> Result<Vec<f64>> {
        let (s, context) = self.gr.step(q, prefix)?;
        let h = self.gr.params.w_v.mul_vec(&context)?;
        let i = prefix.len();
        candidates.iter().map(|&v| Ok(dot(&self.bank.project(i, v, &s)?, &h))).collect()
    }
}

pub struct NpState {
    q: TokenMatrix,
    pool: Matrix,
    by_token: BTreeMap<TokenId, Vec<usize>>,
}

impl IdentifierDecoder for NpModel {
    type State = NpState;

    fn start(&self, query_ids: &[TokenId]) -> Result<NpState> {
        let (pool, ids, _) = self.pool()?;
        let mut by_token: BTreeMap<TokenId, Vec<usize>> = BTreeMap::new();
        for (row, t) in ids.into_iter().enumerate() {
            by_token.entry(t).or_default().push(row);
        }
        Ok(NpState { q: self.gr.encode_query(query_ids)?, pool, by_token })
    }

    /// Each candidate token aggregates, by log-sum-exp, over every stored
    /// vector carrying that token.
    fn next_logits(&self, state: &NpState, prefix: &[TokenId], candidates: &[TokenId]) -> Result<Vec<f64>> {
        let (_, context) = self.gr.step(&state.q, prefix)?;
        Ok(candidates
            .iter()
            .map(|v| match state.by_token.get(v) {
                Some(rows) => {
                    let z: Vec<f64> = rows.iter().map(|&r| dot(state.pool.row(r), &context)).collect();
                    logsumexp(&z)
                }
                None => f64::NEG_INFINITY,
            })
            .collect())
    }
}

/// Column-softmax of `D^T Q`: for each query token, a distribution over
/// document positions.
pub fn soft_q2d(d: &TokenMatrix, q: &TokenMatrix) -> Result<Matrix> {
    Ok(softmax_cols(&d.similarity(q)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig { vocab_size: 20, dim: 4, span_len: 3, query_len: 4, doc_len: 6 }
    }

    #[test]
    fn paradigm_names() {
        assert_eq!("gr-pawa".parse::<Paradigm>().unwrap(), Paradigm::GrPawa);
        assert!("dpr".parse::<Paradigm>().is_err());
        assert_eq!(serde_json::to_string(&Paradigm::GrNp).unwrap(), "\"gr-np\"");
    }

    #[test]
    fn clean_drops_padding_and_truncates() {
        assert_eq!(clean_ids(&[5, PAD, 6, 7], 2, "x").unwrap(), vec![5, 6]);
        assert!(clean_ids(&[PAD], 2, "x").is_err());
    }

    #[test]
    fn step_logits_match_teacher_forcing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = GrModel::random(config(), &mut rng).unwrap();
        let q = m.encode_query(&[5, 6, 7]).unwrap();
        let ident = [8, 9, 10];
        let ce = crate::relevance::cross_attention(&ident, &q, &m.params).unwrap();
        for i in 0..3 {
            let z = m.next_logits(&q, &ident[..i], &[ident[i]]).unwrap();
            let expect = dot(m.params.table.vector(ident[i]).unwrap(), ce.hidden.row(i));
            assert!((z[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pawa_step_matches_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = PawaModel::random(config(), &mut rng).unwrap();
        let q = m.gr.encode_query(&[5, 6]).unwrap();
        let ident = [8, 9, 10];
        let latents = decoder_states(&ident, &m.gr.params).unwrap();
        let rel = rel_pawa(&ident, &q, &m.gr.params, &m.bank, &latents).unwrap();
        for i in 0..3 {
            let z = m.next_logits(&q, &ident[..i], &[ident[i]]).unwrap();
            assert!((z[0] - rel.per_position[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn np_absent_token_cannot_be_emitted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let docs = vec![vec![5, 6, 7, 8], vec![9, 10]];
        let m = NpModel::random(config(), &docs, &mut rng).unwrap();
        let st = m.start(&[5]).unwrap();
        let z = m.next_logits(&st, &[], &[5, 8, 9]).unwrap();
        assert!(z[0].is_finite() && z[2].is_finite());
        assert_eq!(z[1], f64::NEG_INFINITY);
        let (pool, ids, offsets) = m.pool().unwrap();
        assert_eq!(pool.rows(), 5);
        assert_eq!(ids, vec![5, 6, 7, 9, 10]);
        assert_eq!(offsets, vec![0, 3]);
    }

    #[test]
    fn model_serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Model::random(Paradigm::GrPawa, config(), &[], &mut rng).unwrap();
        let back: Model = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}

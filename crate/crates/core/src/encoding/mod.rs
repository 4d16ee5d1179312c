//! Tokenization, embedding tables and the document-encoding variants:
//! static embeddings, contextual token vectors, PAWA projections and the
//! nonparametric contextual store.

mod attention;
mod embedding;
mod pawa;
mod store;
mod vocab;

pub use attention::{
    encode_causal, encode_contextual, AttentionCache, AttentionGrads, SelfAttention,
};
pub(crate) use attention::encode_with;
pub use embedding::{embed_static, EmbeddingTable, EncodedSequence, TokenMatrix};
pub(crate) use embedding::uniform_matrix;
pub use pawa::{pawa_encode, PawaBank};
pub use store::{np_store_refresh, ContextualStore, RefreshPeriod, StoredDocument};
pub use vocab::{pad_to, split_words, TokenId, Vocab, BOS, CLS, EOS, PAD, RESERVED, UNK};

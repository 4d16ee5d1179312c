//! Frozen contextual token vectors used as the decoder's output table in
//! nonparametric decoding.

use serde::{Deserialize, Serialize};

use super::embedding::TokenMatrix;
use super::vocab::TokenId;
use crate::error::{Error, Result};

/// How often the store is re-encoded during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefreshPeriod {
    /// Re-encode every `n` epochs (`n >= 1`), starting at epoch 0.
    Every(usize),
    /// Encode once at initialization and never again.
    Never,
}

impl RefreshPeriod {
    pub fn every(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("refresh period must be at least 1"));
        }
        Ok(Self::Every(n))
    }

    pub fn is_due(self, epoch: usize) -> bool {
        match self {
            RefreshPeriod::Every(n) => n > 0 && epoch.is_multiple_of(n),
            RefreshPeriod::Never => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDocument {
    pub ids: Vec<TokenId>,
    pub vectors: TokenMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualStore {
    docs: Vec<StoredDocument>,
    /// Epochs at which the store was (re-)encoded; empty after plain construction.
    refreshed_at: Vec<usize>,
}

impl ContextualStore {
    /// Encodes every document once.
    pub fn build<F>(docs: &[Vec<TokenId>], encoder: F) -> Result<Self>
    where
        F: Fn(&[TokenId]) -> Result<TokenMatrix>,
    {
        let docs = docs
            .iter()
            .map(|ids| {
                let vectors = encoder(ids)?;
                if vectors.len() != ids.len() {
                    return Err(Error::invalid("encoder output length differs from document length"));
                }
                Ok(StoredDocument { ids: ids.clone(), vectors })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { docs, refreshed_at: Vec::new() })
    }

    pub fn from_documents(docs: Vec<StoredDocument>) -> Result<Self> {
        if docs.iter().any(|d| d.ids.len() != d.vectors.len()) {
            return Err(Error::invalid("stored matrix shape differs from document length"));
        }
        Ok(Self { docs, refreshed_at: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn document(&self, doc: usize) -> Result<&StoredDocument> {
        self.docs.get(doc).ok_or_else(|| Error::UnknownDocument(doc.to_string()))
    }

    pub fn documents(&self) -> &[StoredDocument] {
        &self.docs
    }

    pub fn refreshed_at(&self) -> &[usize] {
        &self.refreshed_at
    }
}

/// Re-encodes every stored document when `period` is due at `epoch`;
/// otherwise returns the store unchanged.
pub fn np_store_refresh<F>(
    store: ContextualStore,
    encoder: F,
    period: RefreshPeriod,
    epoch: usize,
) -> Result<ContextualStore>
where
    F: Fn(&[TokenId]) -> Result<TokenMatrix>,
{
    if !period.is_due(epoch) {
        return Ok(store);
    }
    let ids: Vec<Vec<TokenId>> = store.docs.iter().map(|d| d.ids.clone()).collect();
    let mut fresh = ContextualStore::build(&ids, encoder)?;
    fresh.refreshed_at = store.refreshed_at;
    fresh.refreshed_at.push(epoch);
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use std::cell::Cell;

    fn encoder_with_scale(scale: f64) -> impl Fn(&[TokenId]) -> Result<TokenMatrix> {
        move |ids: &[TokenId]| {
            Matrix::from_fn(ids.len(), 2, |i, j| scale * (ids[i] + j) as f64).map(TokenMatrix::new)
        }
    }

    fn docs() -> Vec<Vec<TokenId>> {
        vec![vec![5, 6, 7], vec![8, 9]]
    }

    #[test]
    fn every_epoch_tracks_fresh_encoder() {
        let mut store = ContextualStore::build(&docs(), encoder_with_scale(0.0)).unwrap();
        for epoch in 0..4 {
            let scale = epoch as f64 + 1.0;
            store = np_store_refresh(store, encoder_with_scale(scale), RefreshPeriod::every(1).unwrap(), epoch)
                .unwrap();
            let fresh = ContextualStore::build(&docs(), encoder_with_scale(scale)).unwrap();
            assert_eq!(store.documents(), fresh.documents());
        }
    }

    #[test]
    fn never_keeps_initial_store() {
        let init = ContextualStore::build(&docs(), encoder_with_scale(1.0)).unwrap();
        let mut store = init.clone();
        for epoch in 0..10 {
            store = np_store_refresh(store, encoder_with_scale(epoch as f64 + 7.0), RefreshPeriod::Never, epoch)
                .unwrap();
        }
        assert_eq!(store, init);
    }

    #[test]
    fn period_three_refreshes_at_zero_and_three() {
        let calls = Cell::new(0usize);
        let mut store = ContextualStore::build(&docs(), encoder_with_scale(1.0)).unwrap();
        let period = RefreshPeriod::every(3).unwrap();
        // oracle: epochs e in 0..=5 with e mod 3 == 0
        let expected: Vec<usize> = (0..=5).filter(|e| e % 3 == 0).collect();
        for epoch in 0..=5 {
            store = np_store_refresh(
                store,
                |ids: &[TokenId]| {
                    calls.set(calls.get() + 1);
                    encoder_with_scale(2.0)(ids)
                },
                period,
                epoch,
            )
            .unwrap();
        }
        assert_eq!(store.refreshed_at(), expected.as_slice());
        assert_eq!(calls.get(), expected.len() * docs().len());
        assert!(RefreshPeriod::every(0).is_err());
    }

    #[test]
    fn unknown_document() {
        let store = ContextualStore::build(&docs(), encoder_with_scale(1.0)).unwrap();
        assert!(matches!(store.document(2), Err(Error::UnknownDocument(_))));
    }
}

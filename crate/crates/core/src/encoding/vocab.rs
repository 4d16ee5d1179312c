use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const CLS: TokenId = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[CLS]"];

/// Lowercases `text` and splits it on runs of non-alphanumeric characters.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token vocabulary with reserved ids 0..=4 and per-token inverse document frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVocab")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    idf: Vec<f64>,
}

#[derive(Deserialize)]
struct RawVocab {
    tokens: Vec<String>,
    idf: Vec<f64>,
}

impl TryFrom<RawVocab> for Vocab {
    type Error = Error;

    fn try_from(raw: RawVocab) -> Result<Self> {
        if raw.tokens.len() != raw.idf.len()
            || raw.tokens.len() < RESERVED.len()
            || raw.tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::invalid("malformed vocabulary"));
        }
        let mut v = Vocab::from_words(raw.tokens[RESERVED.len()..].to_vec())?;
        v.idf = raw.idf;
        Ok(v)
    }
}

impl Vocab {
    /// Keeps the `max_size` most frequent words (ties broken alphabetically) and
    /// computes `idf = ln(|docs| / df)` over the same documents.
    pub fn build<'a, I>(docs: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
        I::IntoIter: Clone,
    {
        let docs = docs.into_iter();
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for doc in docs.clone() {
            for w in doc {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        let words: Vec<String> = ranked.into_iter().map(|(w, _)| w.to_string()).collect();
        let mut vocab = Self::from_words(words).expect("corpus words are unique and non-reserved");
        vocab.compute_idf(docs);
        vocab
    }

    /// Builds a vocabulary from non-reserved words; ids start at 5 in the given order.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let idf = vec![0.0; tokens.len()];
        Ok(Self { tokens, index, idf })
    }

    /// Recomputes idf from document word lists. Tokens absent from every
    /// document (including the reserved ones) get idf 0.
    pub fn compute_idf<'a>(&mut self, docs: impl IntoIterator<Item = &'a [String]>) {
        let mut df = vec![0usize; self.tokens.len()];
        let mut n_docs = 0usize;
        let mut seen = vec![usize::MAX; self.tokens.len()];
        for (d, doc) in docs.into_iter().enumerate() {
            n_docs += 1;
            for w in doc {
                if let Some(&id) = self.index.get(w) {
                    if seen[id] != d {
                        seen[id] = d;
                        df[id] += 1;
                    }
                }
            }
        }
        self.idf = df
            .iter()
            .map(|&f| if f == 0 { 0.0 } else { (n_docs as f64 / f as f64).ln() })
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn idf(&self, id: TokenId) -> f64 {
        self.idf.get(id).copied().unwrap_or(0.0)
    }

    pub fn idf_values(&self) -> &[f64] {
        &self.idf
    }

    pub fn tokenize_unpadded(&self, text: &str) -> Vec<TokenId> {
        split_words(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Tokenizes, then truncates or right-pads with PAD to exactly `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<TokenId>> {
        pad_to(self.tokenize_unpadded(text), max_len)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `k` holds id `k + 5`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for t in &self.tokens[RESERVED.len()..] {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut words = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "vocabulary lines must hold exactly one token".into(),
                });
            }
            words.push(line);
        }
        Self::from_words(words)
    }
}

/// Truncates or right-pads `ids` with PAD to exactly `max_len`.
pub fn pad_to(mut ids: Vec<TokenId>, max_len: usize) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    ids.resize(max_len, PAD);
    Ok(ids)
}

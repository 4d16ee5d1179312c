//! Synthetic memorization corpus.
//!
//! Words fall into three groups: `lead` words (`a*`), `second` words (`b*`)
//! and `body` words (`c*`). Document `k` opens with a distinct (lead, second)
//! pair and continues with random body words, so its identifier prefix is
//! unique. Its query holds the opening pair plus a few of its body words.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{Document, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub docs: usize,
    pub words: usize,
    pub doc_len: usize,
    /// Body words added to each query beside the opening pair.
    pub query_extra: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { docs: 100, words: 50, doc_len: 20, query_extra: 2, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: Vec<Document>,
    pub queries: Vec<Query>,
    /// `(qid, docid)`.
    pub qrels: Vec<(String, String)>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let lead = (spec.docs as f64).sqrt().ceil() as usize;
    if spec.docs == 0 || spec.doc_len < 3 || spec.words < 2 * lead + 1 {
        return Err(Error::invalid(format!(
            "cannot build {} distinct documents from {} words (need at least {})",
            spec.docs,
            spec.words,
            2 * lead + 1
        )));
    }
    let body: Vec<String> = (0..spec.words - 2 * lead).map(|k| format!("c{k:02}")).collect();
    let width = (spec.docs - 1).to_string().len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SyntheticCorpus { docs: Vec::new(), queries: Vec::new(), qrels: Vec::new() };
    for k in 0..spec.docs {
        let first = format!("a{:02}", k % lead);
        let second = format!("b{:02}", k / lead);
        let words: Vec<&String> = (2..spec.doc_len).map(|_| body.choose(&mut rng).expect("body words")).collect();
        let mut text = format!("{first} {second}");
        for w in &words {
            text.push(' ');
            text.push_str(w);
        }
        let id = format!("d{k:0width$}");
        let mut q: Vec<String> = vec![first, second];
        let extra = spec.query_extra.min(words.len());
        q.extend(rand::seq::index::sample(&mut rng, words.len(), extra).into_iter().map(|i| words[i].clone()));
        q.shuffle(&mut rng);
        let qid = format!("q{k:0width$}");
        out.queries.push(Query { id: qid.clone(), text: q.join(" ") });
        out.qrels.push((qid, id.clone()));
        out.docs.push(Document { id, text });
    }
    Ok(out)
}

//! JSON-lines corpus, TSV queries, qrels and runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::{split_words, TokenId, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Reads one `{"id": .., "text": ..}` object per line. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| parse_error(path, k + 1, e.to_string()))?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Documents tokenized against one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
    tokens: Vec<Vec<TokenId>>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>, vocab: &Vocab) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut index = HashMap::with_capacity(docs.len());
        for (k, d) in docs.iter().enumerate() {
            if index.insert(d.id.clone(), k).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        let tokens = docs.iter().map(|d| vocab.tokenize_unpadded(&d.text)).collect();
        Ok(Self { docs, tokens, index })
    }

    pub fn ingest(path: &Path, vocab: &Vocab) -> Result<Self> {
        Self::new(read_jsonl(path)?, vocab)
    }

    /// Vocabulary of the `max_words` most frequent words of `docs`.
    pub fn build_vocab(docs: &[Document], max_words: usize) -> Vocab {
        let words: Vec<Vec<String>> = docs.iter().map(|d| split_words(&d.text)).collect();
        Vocab::build(words.iter().map(Vec::as_slice), max_words)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn id(&self, doc: usize) -> &str {
        &self.docs[doc].id
    }

    pub fn tokens(&self, doc: usize) -> &[TokenId] {
        &self.tokens[doc]
    }

    pub fn all_tokens(&self) -> &[Vec<TokenId>] {
        &self.tokens
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn average_length(&self) -> f64 {
        self.tokens.iter().map(Vec::len).sum::<usize>() as f64 / self.len() as f64
    }
}

fn read_tsv_pairs(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(path, k + 1, "expected two tab-separated fields"))?;
        out.push((k + 1, a.to_string(), b.to_string()));
    }
    Ok(out)
}

/// `qid<TAB>text` per line.
pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (_, id, text) in read_tsv_pairs(path)? {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        out.push(Query { id, text });
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for q in queries {
        writeln!(w, "{}\t{}", q.id, q.text)?;
    }
    w.flush()?;
    Ok(())
}

/// Relevant document ids per query id.
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

/// `qid<TAB>docid` per line.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (_, qid, doc) in read_tsv_pairs(path)? {
        q.entry(qid).or_default().insert(doc);
    }
    Ok(q)
}

pub fn write_qrels(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (q, d) in pairs {
        writeln!(w, "{q}\t{d}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc: String,
    pub score: f64,
}

/// Ranked hits per query id.
pub type Run = BTreeMap<String, Vec<Hit>>;

/// `qid<TAB>rank<TAB>docid<TAB>score` with 1-based ranks and six decimals.
pub fn write_run(path: &Path, run: &Run) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (qid, hits) in run {
        for (r, h) in hits.iter().enumerate() {
            writeln!(w, "{qid}\t{}\t{}\t{:.6}", r + 1, h.doc, h.score)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_run(path: &Path) -> Result<Run> {
    let reader = BufReader::new(File::open(path)?);
    let mut run = Run::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_error(path, k + 1, "expected qid, rank, docid and score"));
        }
        let rank: usize = f[1].parse().map_err(|_| parse_error(path, k + 1, "bad rank"))?;
        let score: f64 = f[3].parse().map_err(|_| parse_error(path, k + 1, "bad score"))?;
        let hits = run.entry(f[0].to_string()).or_default();
        if rank != hits.len() + 1 {
            return Err(parse_error(path, k + 1, format!("rank {rank} out of sequence")));
        }
        hits.push(Hit { doc: f[2].to_string(), score });
    }
    Ok(run)
}

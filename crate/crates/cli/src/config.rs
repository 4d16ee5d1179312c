//! Run configuration: defaults, then a JSON config file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use unirel::alignment::Direction;
use unirel::encoding::RefreshPeriod;
use unirel::exec::Execution;
use unirel::model::Paradigm;
use unirel::trainer::TrainConfig;

use crate::failure::{CliResult, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL documents, one `{"id", "text"}` object per line.
    pub corpus: Option<PathBuf>,
    /// TSV `qid<TAB>text`.
    pub queries: Option<PathBuf>,
    /// TSV `qid<TAB>docid`.
    pub qrels: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; the library default when unset.
    pub threads: Option<usize>,
    pub execution: Execution,
    /// Most frequent corpus words kept, not counting the reserved tokens.
    pub vocab_size: usize,
    pub dim: usize,
    pub paradigm: Paradigm,
    /// Alignment direction of multi-vector scoring and training.
    pub direction: Direction,
    pub span_len: usize,
    pub query_len: usize,
    pub doc_len: usize,
    pub beam: usize,
    /// Nearest pool vectors gathered per query token.
    pub k_token: usize,
    /// Documents kept per query in every run file.
    pub k_final: usize,
    pub rerank_depth: usize,
    pub rerank_directions: Vec<Direction>,
    pub trie_doc_cap: usize,
    pub train: TrainOptions,
    pub analysis: AnalysisOptions,
    pub synth: SynthOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            queries: None,
            qrels: None,
            out: PathBuf::from("run"),
            seed: 0,
            threads: None,
            execution: Execution::default(),
            vocab_size: 50_000,
            dim: 16,
            paradigm: Paradigm::Gr,
            direction: Direction::QueryToDoc,
            span_len: 3,
            query_len: 32,
            doc_len: 128,
            beam: 5,
            k_token: 10,
            k_final: 10,
            rerank_depth: unirel::retrieval::RERANK_DEPTH,
            rerank_directions: vec![Direction::QueryToDoc, Direction::DocToQuery],
            trie_doc_cap: unirel::retrieval::DEFAULT_DOC_CAP,
            train: TrainOptions::default(),
            analysis: AnalysisOptions::default(),
            synth: SynthOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Sampled negatives per example; the full vocabulary when unset.
    pub negatives: Option<usize>,
    pub refresh: RefreshPeriod,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            momentum: t.momentum,
            negatives: t.negatives,
            refresh: t.refresh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub buckets: usize,
    /// Explicit bucket edges; equal-width bins over the vocabulary's IDF range otherwise.
    pub edges: Option<Vec<f64>>,
    /// BM25 candidates per query.
    pub depth: usize,
    /// Leading queries analysed; all when unset.
    pub max_queries: Option<usize>,
    /// Keep per-token records in the JSON reports.
    pub records: bool,
    pub lowrank_instances: usize,
    pub sweep: Vec<f64>,
    pub heatmap: bool,
    pub pgm: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            buckets: unirel::analysis::DEFAULT_BUCKETS,
            edges: None,
            depth: 10,
            max_queries: None,
            records: true,
            lowrank_instances: 200,
            sweep: vec![1.0, 0.5, 0.1, 0.01, 0.0],
            heatmap: false,
            pgm: true,
        }
    }
}

/// Shape of the generated corpus; the run seed drives generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub docs: usize,
    pub words: usize,
    pub doc_len: usize,
    pub query_extra: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        let s = unirel::synthetic::SyntheticSpec::default();
        Self { docs: s.docs, words: s.words, doc_len: s.doc_len, query_extra: s.query_extra }
    }
}

/// Flag-level overrides, applied last.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// `key=value` pairs; dotted keys reach nested sections and values parse as JSON
    /// when they can, as strings otherwise.
    pub set: Vec<String>,
    /// Typed `(key, value)` pairs from dedicated flags, applied after `set`.
    pub fields: Vec<(String, Value)>,
}

/// Key under which a manifest nests the resolved config; such a manifest is
/// itself accepted as a config file.
pub const MANIFEST_CONFIG_KEY: &str = "config";
pub const MANIFEST_MARKER: &str = "manifest_version";

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
            let mut layer: Value = serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("config {} is not valid JSON: {e}", path.display())))?;
            if layer.get(MANIFEST_MARKER).is_some() {
                layer = layer
                    .get(MANIFEST_CONFIG_KEY)
                    .cloned()
                    .ok_or_else(|| Failure::config(format!("manifest {} has no config block", path.display())))?;
            }
            if !layer.is_object() {
                return Err(Failure::config(format!("config {} must be a JSON object", path.display())));
            }
            merge(&mut value, layer);
        }
        for pair in &overrides.set {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("--set expects key=value, got `{pair}`")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        for (key, v) in &overrides.fields {
            set_path(&mut value, key, v.clone())?;
        }
        if let Some(seed) = overrides.seed {
            value["seed"] = seed.into();
        }
        if let Some(out) = &overrides.out {
            value["out"] = Value::String(out.to_string_lossy().into_owned());
        }
        if let Some(threads) = overrides.threads {
            value["threads"] = threads.into();
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Failure::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("span_len", self.span_len),
            ("query_len", self.query_len),
            ("doc_len", self.doc_len),
            ("beam", self.beam),
            ("k_token", self.k_token),
            ("k_final", self.k_final),
            ("rerank_depth", self.rerank_depth),
            ("trie_doc_cap", self.trie_doc_cap),
            ("analysis.buckets", self.analysis.buckets),
            ("analysis.depth", self.analysis.depth),
            ("analysis.lowrank_instances", self.analysis.lowrank_instances),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Failure::config(format!("{name} must be at least 1")));
        }
        if self.threads == Some(0) {
            return Err(Failure::config("threads must be at least 1"));
        }
        if self.analysis.max_queries == Some(0) {
            return Err(Failure::config("analysis.max_queries must be at least 1"));
        }
        if self.rerank_directions.is_empty() {
            return Err(Failure::config("rerank_directions must name at least one direction"));
        }
        if self.analysis.sweep.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Failure::config("analysis.sweep values must be finite and non-negative"));
        }
        if let Some(edges) = &self.analysis.edges {
            unirel::analysis::IdfBuckets::from_edges(edges.clone()).map_err(|e| Failure::config(format!("analysis.edges: {e}")))?;
        }
        self.train_config().validate().map_err(|e| Failure::config(format!("train: {e}")))?;
        Ok(())
    }

    /// Fails unless the named input path is configured and exists.
    pub fn input(&self, name: &str) -> CliResult<&Path> {
        let path = match name {
            "corpus" => &self.corpus,
            "queries" => &self.queries,
            "qrels" => &self.qrels,
            _ => unreachable!("unknown input {name}"),
        };
        let path = path
            .as_deref()
            .ok_or_else(|| Failure::config(format!("`{name}` is not set (config key or --set {name}=PATH)")))?;
        if !path.is_file() {
            return Err(Failure::config(format!("{name} file {} does not exist", path.display())));
        }
        Ok(path)
    }

    /// An optional input that, when configured, must exist.
    pub fn optional_input(&self, name: &str) -> CliResult<Option<&Path>> {
        let set = match name {
            "queries" => self.queries.is_some(),
            "qrels" => self.qrels.is_some(),
            _ => self.corpus.is_some(),
        };
        if set {
            self.input(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn synthetic_spec(&self) -> unirel::synthetic::SyntheticSpec {
        unirel::synthetic::SyntheticSpec {
            docs: self.synth.docs,
            words: self.synth.words,
            doc_len: self.synth.doc_len,
            query_extra: self.synth.query_extra,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            paradigm: self.paradigm,
            negatives: self.train.negatives,
            refresh: self.train.refresh,
            momentum: self.train.momentum,
            direction: self.direction,
            execution: self.execution,
        }
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Failure::config(format!("malformed key `{key}`")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::config(format!("`{}` is not a section", parts[..k].join("."))))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

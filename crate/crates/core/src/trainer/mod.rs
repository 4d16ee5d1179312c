//! Mini-batch gradient descent with momentum for every paradigm.

mod decoder;
mod gradcheck;
mod mvdr;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::Direction;
use crate::encoding::{np_store_refresh, RefreshPeriod, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::exec::{tree_reduce, Execution};
use crate::linalg::Matrix;
use crate::model::{clean_ids, GrModel, Model, ModelConfig, MvdrModel, NpModel, Paradigm, PawaModel};
use crate::relevance::{sample_negatives, Negatives};
use crate::retrieval::{Corpus, Qrels, Query};

use decoder::{decoder_item, DecoderGrad, Head, Outputs};

pub use gradcheck::{grad_check, GradCheckReport};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub paradigm: Paradigm,
    /// Sampled negatives per example for the generative losses; `None` uses
    /// the full vocabulary.
    pub negatives: Option<usize>,
    pub refresh: RefreshPeriod,
    pub momentum: f64,
    /// Alignment direction of the multi-vector score.
    pub direction: Direction,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 10,
            paradigm: Paradigm::Gr,
            negatives: None,
            refresh: RefreshPeriod::Every(1),
            momentum: 0.9,
            direction: Direction::QueryToDoc,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.paradigm == Paradigm::Mvdr && self.batch_size < 2 {
            return Err(Error::invalid("contrastive training needs a batch size of at least 2"));
        }
        if self.negatives == Some(0) {
            return Err(Error::invalid("negative sample count must be positive"));
        }
        if self.refresh == RefreshPeriod::Every(0) {
            return Err(Error::invalid("refresh period must be at least 1"));
        }
        Ok(())
    }
}

/// A training query and the index of its relevant document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub query: Vec<TokenId>,
    pub doc: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingSet {
    pub docs: Vec<Vec<TokenId>>,
    pub examples: Vec<Example>,
}

impl TrainingSet {
    /// One example per judged (query, document) pair, in query order.
    pub fn from_judgments(corpus: &Corpus, vocab: &Vocab, queries: &[Query], qrels: &Qrels) -> Result<Self> {
        let mut examples = Vec::new();
        for q in queries {
            let Some(rel) = qrels.get(&q.id) else { continue };
            let ids = vocab.tokenize_unpadded(&q.text);
            for doc_id in rel {
                let doc = corpus.position(doc_id).ok_or_else(|| Error::UnknownDocument(doc_id.clone()))?;
                examples.push(Example { query: ids.clone(), doc });
            }
        }
        Ok(Self { docs: corpus.all_tokens().to_vec(), examples })
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if let Some(e) = self.examples.iter().find(|e| e.doc >= self.docs.len()) {
            return Err(Error::UnknownDocument(format!("document index {} of {}", e.doc, self.docs.len())));
        }
        Ok(())
    }
}

/// Trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.rows() * m.cols()).sum()
    }
}

impl Parameters for Matrix {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![self]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![self]
    }
}

impl Parameters for MvdrModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let e = &self.encoder;
        vec![self.table.weights(), &e.w_query, &e.w_key, &e.w_value]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let e = &mut self.encoder;
        vec![self.table.weights_mut(), &mut e.w_query, &mut e.w_key, &mut e.w_value]
    }
}

impl Parameters for GrModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let (e, p) = (&self.encoder, &self.params);
        let d = &p.decoder;
        vec![
            p.table.weights(),
            &e.w_query,
            &e.w_key,
            &e.w_value,
            &d.w_query,
            &d.w_key,
            &d.w_value,
            &p.w,
            &p.w_v,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let (e, p) = (&mut self.encoder, &mut self.params);
        let d = &mut p.decoder;
        vec![
            p.table.weights_mut(),
            &mut e.w_query,
            &mut e.w_key,
            &mut e.w_value,
            &mut d.w_query,
            &mut d.w_key,
            &mut d.w_value,
            &mut p.w,
            &mut p.w_v,
        ]
    }
}

impl Parameters for PawaModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.gr.tensors();
        t.push(self.bank.weights());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.gr.tensors_mut();
        t.push(self.bank.weights_mut());
        t
    }
}

/// `W_V` is pinned to the identity and left out.
impl Parameters for NpModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.gr.tensors();
        t.pop();
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.gr.tensors_mut();
        t.pop();
        t
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<&Matrix> {
        match self {
            Model::Mvdr(m) => m.tensors(),
            Model::Gr(m) => m.tensors(),
            Model::GrPawa(m) => m.tensors(),
            Model::GrNp(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Model::Mvdr(m) => m.tensors_mut(),
            Model::Gr(m) => m.tensors_mut(),
            Model::GrPawa(m) => m.tensors_mut(),
            Model::GrNp(m) => m.tensors_mut(),
        }
    }
}

/// One gradient per tensor of [`Parameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn zeros_like(p: &impl Parameters) -> Self {
        Self(p.tensors().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
    }

    pub fn sum(mut self, other: Self) -> Self {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_scaled(1.0, b).expect("gradient shapes agree");
        }
        self
    }

    pub fn scaled(self, s: f64) -> Self {
        Self(self.0.into_iter().map(|m| m.scaled(s)).collect())
    }
}

fn pack(grad: DecoderGrad, paradigm: Paradigm) -> Gradients {
    let DecoderGrad { table, encoder: e, decoder: d, w, w_v, bank } = grad;
    let mut out = vec![table, e.w_query, e.w_key, e.w_value, d.w_query, d.w_key, d.w_value, w];
    if paradigm != Paradigm::GrNp {
        out.push(w_v);
    }
    out.extend(bank);
    Gradients(out)
}

/// Frozen state shared by every example of one pass.
enum Prepared {
    Plain,
    Pool { vectors: Matrix, offsets: Vec<usize> },
}

fn prepare(model: &Model) -> Result<Prepared> {
    Ok(match model {
        Model::GrNp(m) => {
            let (vectors, _, offsets) = m.pool()?;
            Prepared::Pool { vectors, offsets }
        }
        _ => Prepared::Plain,
    })
}

fn decoder_example(
    model: &Model,
    prepared: &Prepared,
    doc_ids: &[TokenId],
    query: &[TokenId],
    doc: usize,
    negatives: &Negatives,
) -> Result<(f64, Gradients)> {
    let gr = model
        .generative()
        .ok_or_else(|| Error::invalid("teacher forcing needs a generative model"))?;
    let query = clean_ids(query, gr.config.query_len, "query")?;
    let ident = gr.identifier(doc_ids)?;
    negatives.validate(&ident)?;
    let vocab = gr.config.vocab_size;
    let (head, use_wv, outputs): (Head<'_>, bool, Vec<Outputs>) = match (model, prepared) {
        (Model::GrNp(_), Prepared::Pool { vectors, offsets }) => {
            let start = *offsets.get(doc).ok_or_else(|| Error::UnknownDocument(format!("document index {doc}")))?;
            let outputs = (0..ident.len())
                .map(|i| Outputs { candidates: (0..vectors.rows()).collect(), target: start + i })
                .collect();
            (Head::Pool(vectors), false, outputs)
        }
        (Model::GrNp(_), Prepared::Plain) => return Err(Error::PoolNotBuilt),
        _ => {
            let outputs = ident
                .iter()
                .map(|&t| {
                    let (candidates, target) = negatives.candidates(t, vocab);
                    Outputs { candidates, target }
                })
                .collect();
            let head = match model {
                Model::GrPawa(m) => Head::Bank(&m.bank),
                _ => Head::Table,
            };
            (head, true, outputs)
        }
    };
    let (loss, grad) = decoder_item(gr, &head, use_wv, &query, &ident, &outputs)?;
    Ok((loss, pack(grad, model.paradigm())))
}

/// Summed teacher-forcing cross-entropy of one (query, document) pair and
/// its gradient. The nonparametric variant scores against the model's
/// current store and ignores `negatives`.
pub fn example_loss_grad(
    model: &Model,
    data: &TrainingSet,
    example: &Example,
    negatives: &Negatives,
) -> Result<(f64, Gradients)> {
    let doc_ids = data
        .docs
        .get(example.doc)
        .ok_or_else(|| Error::UnknownDocument(format!("document index {}", example.doc)))?;
    decoder_example(model, &prepare(model)?, doc_ids, &example.query, example.doc, negatives)
}

/// Mean in-batch contrastive loss over `batch` and its gradient.
pub fn batch_loss_grad(
    model: &MvdrModel,
    data: &TrainingSet,
    batch: &[Example],
    direction: Direction,
    exec: Execution,
) -> Result<(f64, Gradients)> {
    let mut queries = Vec::with_capacity(batch.len());
    let mut docs = Vec::with_capacity(batch.len());
    for e in batch {
        queries.push(clean_ids(&e.query, model.config.query_len, "query")?);
        let d = data
            .docs
            .get(e.doc)
            .ok_or_else(|| Error::UnknownDocument(format!("document index {}", e.doc)))?;
        docs.push(model.doc_tokens(d)?);
    }
    mvdr::mvdr_batch(model, &queries, &docs, direction, exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, measured during the epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in self.loss_curve.iter().enumerate() {
            w.write_record([e.to_string(), format!("{l:.12e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Momentum {
    velocity: Vec<Matrix>,
}

impl Momentum {
    fn new(model: &impl Parameters) -> Self {
        Self { velocity: Gradients::zeros_like(model).0 }
    }

    fn step(&mut self, model: &mut impl Parameters, grad: &Gradients, lr: f64, mu: f64) -> Result<()> {
        for ((p, v), g) in model.tensors_mut().into_iter().zip(&mut self.velocity).zip(&grad.0) {
            *v = v.scaled(mu);
            v.add_scaled(1.0, g)?;
            p.add_scaled(-lr, v)?;
        }
        Ok(())
    }
}

/// Initializes a model from the config's seed and trains it.
pub fn train(config: &TrainConfig, model_config: ModelConfig, data: &TrainingSet) -> Result<(Model, TrainReport)> {
    config.validate()?;
    data.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::random(config.paradigm, model_config, &data.docs, &mut init)?;
    let report = train_model(config, &mut model, data)?;
    Ok((model, report))
}

/// Trains `model` in place. Shuffling and negative sampling draw from a
/// stream seeded by `config.seed`, separate from initialization.
pub fn train_model(config: &TrainConfig, model: &mut Model, data: &TrainingSet) -> Result<TrainReport> {
    config.validate()?;
    data.validate()?;
    if model.paradigm() != config.paradigm {
        return Err(Error::invalid(format!(
            "config trains {:?} but the model is {:?}",
            config.paradigm,
            model.paradigm()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut optimizer = Momentum::new(model);
    let exec = config.execution;
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let mut report = TrainReport { loss_curve: Vec::with_capacity(config.epochs), steps: 0 };
    for epoch in 0..config.epochs {
        if let Model::GrNp(m) = model {
            let refreshed = np_store_refresh(m.store.clone(), NpModel::store_encoder(&m.gr), config.refresh, epoch)?;
            m.store = refreshed;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&k| &data.examples[k]).collect();
            let (loss, grad) = match &*model {
                Model::Mvdr(m) => {
                    let owned: Vec<Example> = batch.iter().map(|&e| e.clone()).collect();
                    let (l, g) = batch_loss_grad(m, data, &owned, config.direction, exec)?;
                    (l * batch.len() as f64, g)
                }
                _ => {
                    let negatives = batch
                        .iter()
                        .map(|e| match config.negatives {
                            None => Ok(Negatives::Full),
                            Some(k) => {
                                let gr = model.generative().expect("generative model");
                                let ident = gr.identifier(&data.docs[e.doc])?;
                                Ok(Negatives::Sampled(sample_negatives(gr.config.vocab_size, &ident, k, &mut rng)?))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let prepared = prepare(model)?;
                    let shared: &Model = model;
                    let items: Vec<(&Example, Negatives)> = batch.into_iter().zip(negatives).collect();
                    let parts = exec.try_map(&items, |(e, neg)| {
                        decoder_example(shared, &prepared, &data.docs[e.doc], &e.query, e.doc, neg)
                    })?;
                    let loss: f64 = parts.iter().map(|(l, _)| l).sum();
                    let n = parts.len() as f64;
                    let grad = tree_reduce(parts.into_iter().map(|(_, g)| g).collect(), Gradients::sum)
                        .expect("non-empty batch")
                        .scaled(1.0 / n);
                    (loss, grad)
                }
            };
            epoch_loss += loss;
            optimizer.step(model, &grad, config.learning_rate, config.momentum)?;
            report.steps += 1;
        }
        report.loss_curve.push(epoch_loss / data.examples.len() as f64);
    }
    Ok(report)
}

/// Serialized parameters plus everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub crate_version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: Model) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

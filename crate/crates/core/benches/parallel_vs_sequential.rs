use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unirel::alignment::Direction;
use unirel::exec::Execution;
use unirel::model::{Model, ModelConfig, Paradigm};
use unirel::retrieval::{rerank, retrieve_mvdr, Corpus, Qrels, TokenVectorPool};
use unirel::synthetic::{generate, SyntheticSpec};
use unirel::trainer::{train_model, TrainConfig, TrainingSet};

struct Setup {
    corpus: Corpus,
    queries: Vec<Vec<usize>>,
    data: TrainingSet,
    config: ModelConfig,
}

fn setup() -> Setup {
    let synth = generate(&SyntheticSpec { docs: 400, words: 200, doc_len: 40, query_extra: 4, seed: 1 }).unwrap();
    let vocab = Corpus::build_vocab(&synth.docs, 10_000);
    let corpus = Corpus::new(synth.docs, &vocab).unwrap();
    let mut qrels = Qrels::new();
    for (q, d) in synth.qrels {
        qrels.entry(q).or_default().insert(d);
    }
    let data = TrainingSet::from_judgments(&corpus, &vocab, &synth.queries, &qrels).unwrap();
    let queries = synth.queries.iter().take(32).map(|q| vocab.tokenize_unpadded(&q.text)).collect();
    let config = ModelConfig { vocab_size: vocab.len(), dim: 32, span_len: 3, query_len: 16, doc_len: 40 };
    Setup { corpus, queries, data, config }
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let s = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::random(Paradigm::Mvdr, s.config.clone(), s.corpus.all_tokens(), &mut rng).unwrap();
    let Model::Mvdr(mvdr) = &model else { unreachable!() };
    let pool = TokenVectorPool::build(mvdr, &s.corpus, Execution::Parallel).unwrap();
    let gr = Model::random(Paradigm::Gr, s.config.clone(), s.corpus.all_tokens(), &mut rng).unwrap();
    let all: Vec<usize> = (0..s.corpus.len()).collect();

    let mut group = c.benchmark_group("mvdr_retrieve");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                for q in &s.queries {
                    retrieve_mvdr(mvdr, Some(&pool), &s.corpus, q, 20, 10, exec).unwrap();
                }
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("gr_rerank_corpus");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rerank(&gr, &s.corpus, &s.queries[0], &all, Direction::DocToQuery, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("gr_train_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig { epochs: 1, batch_size: 64, negatives: Some(64), execution: exec, ..TrainConfig::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(|| gr.clone(), |mut m| train_model(&cfg, &mut m, &s.data).unwrap(), criterion::BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

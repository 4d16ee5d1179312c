use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use unirel::alignment::Direction;
use unirel::analysis::{
    alignment_instances, export_heatmap, lowrank_scan, scaling_sweep, token_rates_d2q, token_rates_q2d,
    AlignmentReport, IdfBuckets, LowRankReport, TokenRate,
};
use unirel::encoding::{split_words, TokenId, Vocab, RESERVED};
use unirel::model::{Model, ModelConfig, Paradigm};
use unirel::relevance::decoder_states;
use unirel::retrieval::{
    evaluate, read_jsonl, read_qrels, read_queries, rerank, rerank_candidates, retrieve_gr_model, retrieve_mvdr,
    to_hits, write_jsonl, write_qrels, write_queries, write_run, Bm25Index, Corpus, EvalReport, NgramTrie, Qrels,
    Query, Run, Span, TokenVectorPool,
};
use unirel::trainer::{train, Checkpoint, Parameters, TrainingSet};

use crate::config::RunConfig;
use crate::failure::{CliResult, Context, Failure};
use crate::workspace::{manifest_name, sha256_file, Manifest, Workspace, BM25, CHECKPOINT, POOL, TRIE, VOCAB};

type Inputs = BTreeMap<String, PathBuf>;

fn inputs(pairs: &[(&str, &Path)]) -> Inputs {
    pairs.iter().map(|(k, p)| (k.to_string(), p.to_path_buf())).collect()
}

pub fn direction_tag(d: Direction) -> &'static str {
    match d {
        Direction::QueryToDoc => "q2d",
        Direction::DocToQuery => "d2q",
        Direction::Symmetric => "sym",
    }
}

fn model_config(config: &RunConfig, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        dim: config.dim,
        span_len: config.span_len,
        query_len: config.query_len,
        doc_len: config.doc_len,
    }
}

/// Token vectors together with the model that encoded them.
#[derive(Debug, Serialize, Deserialize)]
struct PoolFile {
    /// `checkpoint:<sha256>` or `init:<seed>`.
    source: String,
    pool: TokenVectorPool,
}

fn checkpoint_source(path: &Path) -> CliResult<String> {
    Ok(format!("checkpoint:{}", sha256_file(path)?))
}

/// Vocabulary from the build step with IDF recomputed over the corpus, after
/// checking that the corpus is the one the build saw.
fn load_corpus(ws: &Workspace, config: &RunConfig) -> CliResult<(Vocab, Corpus, PathBuf)> {
    let path = config.input("corpus")?.to_path_buf();
    let build = Manifest::read(&ws.require(&manifest_name("build"), "build")?)?;
    if let Some(seen) = build.inputs.get("corpus") {
        if seen.sha256 != sha256_file(&path)? {
            return Err(Failure::contract(format!(
                "corpus {} changed since `unirel build`; rerun build",
                path.display()
            )));
        }
    }
    let mut vocab = Vocab::read(&ws.require(VOCAB, "build")?)?;
    let docs = read_jsonl(&path)?;
    let words: Vec<Vec<String>> = docs.iter().map(|d| split_words(&d.text)).collect();
    vocab.compute_idf(words.iter().map(Vec::as_slice));
    let corpus = Corpus::new(docs, &vocab)?;
    Ok((vocab, corpus, path))
}

fn load_checkpoint(ws: &Workspace, vocab: &Vocab) -> CliResult<(Checkpoint, PathBuf)> {
    let path = ws.require(CHECKPOINT, "train")?;
    let ck = Checkpoint::load(&path).context(format!("loading {}", path.display()))?;
    if ck.model.config().vocab_size != vocab.len() {
        return Err(Failure::contract(format!(
            "checkpoint vocabulary has {} entries but {} has {}; rerun `unirel train` after `unirel build`",
            ck.model.config().vocab_size,
            VOCAB,
            vocab.len()
        )));
    }
    Ok((ck, path))
}

fn query_ids(vocab: &Vocab, q: &Query) -> Vec<TokenId> {
    vocab.tokenize_unpadded(&q.text)
}

/// Relevant corpus positions of `qid`.
fn truth(corpus: &Corpus, qrels: &Qrels, qid: &str) -> CliResult<Vec<usize>> {
    let Some(rel) = qrels.get(qid) else { return Ok(Vec::new()) };
    rel.iter()
        .map(|d| corpus.position(d).ok_or_else(|| Failure::contract(format!("qrels name unknown document `{d}` for query {qid}"))))
        .collect()
}

fn write_eval(ws: &mut Workspace, stem: &str, report: &EvalReport) -> CliResult<()> {
    ws.write_text(&format!("{stem}.tsv"), &report.to_tsv())?;
    ws.write_json(&format!("{stem}.json"), report)?;
    println!(
        "{stem}: {} queries  R@1 {:.4}  R@10 {:.4}  MRR@10 {:.4}",
        report.queries, report.recall_at_1, report.recall_at_10, report.mrr_at_10
    );
    Ok(())
}

pub fn synth(config: &RunConfig) -> CliResult<()> {
    let mut ws = Workspace::open(&config.out, "synth")?;
    let data = unirel::synthetic::generate(&config.synthetic_spec()).map_err(|e| Failure::config(e.to_string()))?;
    write_jsonl(&ws.output("corpus.jsonl"), &data.docs)?;
    write_queries(&ws.output("queries.tsv"), &data.queries)?;
    write_qrels(&ws.output("qrels.tsv"), &data.qrels)?;
    println!("wrote {} documents and {} queries to {}", data.docs.len(), data.queries.len(), ws.dir().display());
    ws.finish("synth", config, Inputs::new())?;
    Ok(())
}

pub fn build(config: &RunConfig) -> CliResult<()> {
    let corpus_path = config.input("corpus")?;
    let docs = read_jsonl(corpus_path)?;
    let mut ws = Workspace::open(&config.out, "build")?;
    let vocab = Corpus::build_vocab(&docs, config.vocab_size);
    let corpus = Corpus::new(docs, &vocab)?;
    vocab.write(&ws.output(VOCAB))?;
    ws.write_json(BM25, &Bm25Index::build(&corpus))?;
    let trie = NgramTrie::with_cap(corpus.all_tokens(), config.span_len, config.trie_doc_cap)?;
    ws.write_json(TRIE, &trie)?;

    let mut used = inputs(&[("corpus", corpus_path)]);
    let ck_path = ws.path(CHECKPOINT);
    let trained = if ck_path.is_file() {
        match Checkpoint::load(&ck_path)?.model {
            Model::Mvdr(m) if m.config.vocab_size == vocab.len() => Some(m),
            _ => None,
        }
    } else {
        None
    };
    let (model, source) = match trained {
        Some(m) => {
            used.insert("checkpoint".into(), ck_path.clone());
            let source = checkpoint_source(&ck_path)?;
            (m, source)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let cfg = model_config(config, vocab.len());
            let Model::Mvdr(m) = Model::random(Paradigm::Mvdr, cfg, corpus.all_tokens(), &mut rng)? else {
                unreachable!("requested a multi-vector model")
            };
            (m, format!("init:{}", config.seed))
        }
    };
    let pool = TokenVectorPool::build(&model, &corpus, config.execution)?;
    println!(
        "built vocab ({} entries), bm25 ({} docs), trie ({} nodes), pool ({} vectors from {source})",
        vocab.len(),
        corpus.len(),
        trie.node_count(),
        pool.len()
    );
    ws.write_json(POOL, &PoolFile { source, pool })?;
    ws.finish("build", config, used)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    paradigm: Paradigm,
    examples: usize,
    epochs: usize,
    steps: usize,
    parameters: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
}

pub fn train_cmd(config: &RunConfig) -> CliResult<()> {
    let mut ws = Workspace::open(&config.out, "train")?;
    let (vocab, corpus, corpus_path) = load_corpus(&ws, config)?;
    let (qpath, rpath) = (config.input("queries")?, config.input("qrels")?);
    let queries = read_queries(qpath)?;
    let qrels = read_qrels(rpath)?;
    let data = TrainingSet::from_judgments(&corpus, &vocab, &queries, &qrels)?;
    let tc = config.train_config();
    let (model, report) = train(&tc, model_config(config, vocab.len()), &data)?;
    let summary = TrainSummary {
        paradigm: config.paradigm,
        examples: data.examples.len(),
        epochs: tc.epochs,
        steps: report.steps,
        parameters: model.parameter_count(),
        initial_loss: report.loss_curve.first().copied(),
        final_loss: report.loss_curve.last().copied(),
    };
    Checkpoint::new(tc, model).save(&ws.output(CHECKPOINT))?;
    report.write_loss_csv(&ws.output("loss_curve.csv"))?;
    ws.write_json("train_report.json", &summary)?;
    println!(
        "trained {:?} on {} examples for {} epochs; loss {} -> {}",
        summary.paradigm,
        summary.examples,
        summary.epochs,
        summary.initial_loss.map_or("-".into(), |l| format!("{l:.6}")),
        summary.final_loss.map_or("-".into(), |l| format!("{l:.6}")),
    );
    ws.finish("train", config, inputs(&[("corpus", &corpus_path), ("queries", qpath), ("qrels", rpath)]))?;
    Ok(())
}

struct Retrieved {
    hits: Vec<(usize, f64)>,
    spans: Vec<Span>,
}

pub fn retrieve(config: &RunConfig) -> CliResult<()> {
    let mut ws = Workspace::open(&config.out, "retrieve")?;
    let (vocab, corpus, corpus_path) = load_corpus(&ws, config)?;
    let qpath = config.input("queries")?;
    let queries = read_queries(qpath)?;
    let (ck, ck_path) = load_checkpoint(&ws, &vocab)?;
    let exec = config.execution;
    let results: Vec<Retrieved> = match &ck.model {
        Model::Mvdr(m) => {
            let file: PoolFile = ws.read_json(POOL, "build")?;
            if file.source != checkpoint_source(&ck_path)? {
                return Err(Failure::contract(format!(
                    "{POOL} was encoded by `{}`, not the current checkpoint; rerun `unirel build` after training",
                    file.source
                )));
            }
            exec.try_map(&queries, |q| -> CliResult<Retrieved> {
                let r = retrieve_mvdr(m, Some(&file.pool), &corpus, &query_ids(&vocab, q), config.k_token, config.k_final, exec)
                    .context(format!("query {}", q.id))?;
                Ok(Retrieved { hits: r.ranked, spans: Vec::new() })
            })?
        }
        model => {
            let trie: NgramTrie = ws.read_json(TRIE, "build")?;
            if trie.span_len() != model.config().span_len {
                return Err(Failure::contract(format!(
                    "{TRIE} holds spans up to length {} but the model decodes {} tokens; rerun `unirel build` with span_len={}",
                    trie.span_len(),
                    model.config().span_len,
                    model.config().span_len
                )));
            }
            exec.try_map(&queries, |q| -> CliResult<Retrieved> {
                let mut r = retrieve_gr_model(model, &corpus, &trie, &query_ids(&vocab, q), config.beam, exec)
                    .context(format!("query {}", q.id))?;
                r.ranked.truncate(config.k_final);
                Ok(Retrieved { hits: r.ranked, spans: r.spans })
            })?
        }
    };

    let mut run = Run::new();
    let mut spans = String::new();
    for (q, r) in queries.iter().zip(&results) {
        run.insert(q.id.clone(), to_hits(&corpus, &r.hits));
        for (k, s) in r.spans.iter().enumerate() {
            let ids: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
            writeln!(spans, "{}\t{}\t{:.6}\t{}\t{}", q.id, k + 1, s.log_score, ids.join(" "), vocab.detokenize(&s.tokens))
                .expect("writing to a string");
        }
    }
    write_run(&ws.output("run.tsv"), &run)?;
    if ck.model.paradigm().is_generative() {
        ws.write_text("spans.tsv", &spans)?;
    }
    let mut used = inputs(&[("corpus", &corpus_path), ("queries", qpath), ("checkpoint", &ck_path)]);
    if let Some(rpath) = config.optional_input("qrels")? {
        let qrels = read_qrels(rpath)?;
        let judged: Run = run.into_iter().filter(|(q, _)| qrels.get(q).is_some_and(|r| !r.is_empty())).collect();
        if judged.is_empty() {
            println!("no query has judgments; skipping evaluation");
        } else {
            write_eval(&mut ws, "eval", &evaluate(&judged, &qrels)?)?;
        }
        used.insert("qrels".into(), rpath.to_path_buf());
    }
    println!("retrieved for {} queries with {:?}", queries.len(), ck.model.paradigm());
    ws.finish("retrieve", config, used)?;
    Ok(())
}

#[derive(Serialize)]
struct ScoredPair<'a> {
    qid: &'a str,
    doc: &'a str,
    rank: usize,
    score: unirel::relevance::RelevanceScore,
}

pub fn rerank_cmd(config: &RunConfig) -> CliResult<()> {
    let mut ws = Workspace::open(&config.out, "rerank")?;
    let (vocab, corpus, corpus_path) = load_corpus(&ws, config)?;
    let (qpath, rpath) = (config.input("queries")?, config.input("qrels")?);
    let queries = read_queries(qpath)?;
    let qrels = read_qrels(rpath)?;
    let (ck, ck_path) = load_checkpoint(&ws, &vocab)?;
    let bm25: Bm25Index = ws.read_json(BM25, "build")?;
    let judged: Vec<&Query> = queries.iter().filter(|q| qrels.get(&q.id).is_some_and(|r| !r.is_empty())).collect();
    if judged.is_empty() {
        return Err(Failure::contract("no query in the queries file has judgments"));
    }
    let exec = config.execution;

    let mut pools = Vec::with_capacity(judged.len());
    let mut listing = String::new();
    for q in &judged {
        let ids = query_ids(&vocab, q);
        let cands = rerank_candidates(&bm25, &ids, &truth(&corpus, &qrels, &q.id)?, config.rerank_depth)
            .context(format!("query {}", q.id))?;
        for &c in &cands {
            writeln!(listing, "{}\t{}", q.id, corpus.id(c)).expect("writing to a string");
        }
        pools.push((ids, cands));
    }
    ws.write_text("candidates.tsv", &listing)?;

    for &direction in &config.rerank_directions {
        let tag = direction_tag(direction);
        let ranked = exec.try_map(&pools, |(ids, cands)| rerank(&ck.model, &corpus, ids, cands, direction, exec))?;
        let mut run = Run::new();
        let mut scores = String::new();
        for ((q, ranking), (ids, _)) in judged.iter().zip(&ranked).zip(&pools) {
            run.insert(q.id.clone(), to_hits(&corpus, ranking));
            let qm = ck.model.encode_query(ids)?;
            for (rank, &(doc, _)) in ranking.iter().take(config.k_final).enumerate() {
                let score = ck.model.relevance(&qm, doc, corpus.tokens(doc), direction)?;
                let line = ScoredPair { qid: &q.id, doc: corpus.id(doc), rank: rank + 1, score };
                scores += &serde_json::to_string(&line).map_err(|e| Failure::contract(e.to_string()))?;
                scores.push('\n');
            }
        }
        write_run(&ws.output(&format!("run_rerank_{tag}.tsv")), &run)?;
        ws.write_text(&format!("scores_{tag}.jsonl"), &scores)?;
        write_eval(&mut ws, &format!("eval_rerank_{tag}"), &evaluate(&run, &qrels)?)?;
    }
    if judged.len() < queries.len() {
        println!("skipped {} queries without judgments", queries.len() - judged.len());
    }
    ws.finish(
        "rerank",
        config,
        inputs(&[("corpus", &corpus_path), ("queries", qpath), ("qrels", rpath), ("checkpoint", &ck_path)]),
    )?;
    Ok(())
}

fn buckets_csv(r: &AlignmentReport) -> String {
    let mut s = String::from("bucket,lo,hi,count,hard,soft\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.12e}"));
    for b in 0..r.counts.len() {
        writeln!(
            s,
            "{b},{:.12e},{:.12e},{},{},{}",
            r.edges[b],
            r.edges[b + 1],
            r.counts[b],
            cell(r.hard_rate[b]),
            cell(r.soft_rate[b])
        )
        .expect("writing to a string");
    }
    s
}

fn write_alignment(ws: &mut Workspace, report: &AlignmentReport) -> CliResult<()> {
    let tag = direction_tag(report.direction);
    ws.write_json(&format!("alignment_{tag}.json"), report)?;
    ws.write_text(&format!("alignment_{tag}.txt"), &report.to_text())?;
    ws.write_text(&format!("alignment_{tag}.csv"), &buckets_csv(report))?;
    print!("{}", report.to_text());
    Ok(())
}

fn lowrank_csv(r: &LowRankReport) -> String {
    let mut s = String::from("instance,w_l1,residual_frobenius,residual_one_inf,a_frobenius,relative_error\n");
    for (k, x) in r.records.iter().enumerate() {
        writeln!(
            s,
            "{k},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            x.w_l1, x.residual_frobenius, x.residual_one_inf, x.a_frobenius, x.relative_error
        )
        .expect("writing to a string");
    }
    s
}

pub fn analyze(config: &RunConfig) -> CliResult<()> {
    let mut ws = Workspace::open(&config.out, "analyze")?;
    let (vocab, corpus, corpus_path) = load_corpus(&ws, config)?;
    let qpath = config.input("queries")?;
    let mut queries = read_queries(qpath)?;
    if let Some(n) = config.analysis.max_queries {
        queries.truncate(n);
    }
    let qrels = match config.optional_input("qrels")? {
        Some(p) => read_qrels(p)?,
        None => Qrels::new(),
    };
    let (ck, ck_path) = load_checkpoint(&ws, &vocab)?;
    let bm25: Bm25Index = ws.read_json(BM25, "build")?;
    let model = &ck.model;
    let exec = config.execution;
    let idf = vocab.idf_values();
    let buckets = match &config.analysis.edges {
        Some(e) => IdfBuckets::from_edges(e.clone())?,
        None => IdfBuckets::over(&idf[RESERVED.len()..], config.analysis.buckets)?,
    };

    let mut q2d: Vec<TokenRate> = Vec::new();
    let mut d2q: Vec<TokenRate> = Vec::new();
    let mut pairs: Vec<(Vec<TokenId>, usize)> = Vec::new();
    for q in &queries {
        let ids = query_ids(&vocab, q);
        let cands = rerank_candidates(&bm25, &ids, &truth(&corpus, &qrels, &q.id)?, config.analysis.depth)
            .context(format!("query {}", q.id))?;
        let forward = alignment_instances(model, &corpus, &ids, &cands, Direction::QueryToDoc, exec)
            .context(format!("query {}", q.id))?;
        q2d.extend(token_rates_q2d(&forward, idf)?);
        let backward = alignment_instances(model, &corpus, &ids, &cands, Direction::DocToQuery, exec)
            .context(format!("query {}", q.id))?;
        d2q.extend(token_rates_d2q(&backward, idf)?);
        pairs.extend(cands.iter().map(|&c| (ids.clone(), c)));
    }
    if pairs.is_empty() {
        return Err(Failure::contract("no queries to analyse"));
    }
    let keep = config.analysis.records;
    write_alignment(&mut ws, &AlignmentReport::build(Direction::QueryToDoc, &buckets, &q2d, keep)?)?;
    write_alignment(&mut ws, &AlignmentReport::build(Direction::DocToQuery, &buckets, &d2q, keep)?)?;

    if let Some(gr) = model.generative() {
        pairs.truncate(config.analysis.lowrank_instances);
        let report = lowrank_scan(model, &corpus, &pairs, exec)?;
        ws.write_json("lowrank.json", &report)?;
        ws.write_text("lowrank.txt", &report.to_text())?;
        ws.write_text("lowrank.csv", &lowrank_csv(&report))?;
        print!("{}", report.to_text());

        let (ids, doc) = &pairs[0];
        let qm = gr.encode_query(ids)?;
        let states = decoder_states(&gr.identifier(corpus.tokens(*doc))?, &gr.params)?;
        let mut sweep = String::from("t,residual_frobenius,residual_one_inf\n");
        for p in scaling_sweep(&states, &qm, &gr.params.w, &config.analysis.sweep)? {
            writeln!(sweep, "{:.12e},{:.12e},{:.12e}", p.t, p.residual_frobenius, p.residual_one_inf).expect("writing to a string");
        }
        ws.write_text("sweep.csv", &sweep)?;
    } else {
        println!("low-rank diagnostics skipped: {:?} has no cross-attention", model.paradigm());
    }

    if config.analysis.heatmap {
        let (ids, doc) = &pairs[0];
        let inst = alignment_instances(model, &corpus, ids, &[*doc], config.direction, exec)?;
        let inst = &inst[0];
        let label = |ts: &[TokenId]| -> Vec<String> { ts.iter().enumerate().map(|(k, &t)| format!("{k}:{}", vocab.token(t))).collect() };
        let files = export_heatmap(
            &inst.a,
            &label(&inst.doc_ids),
            &label(&inst.query_ids),
            &ws.output("heatmap.csv"),
            config.analysis.pgm,
        )?;
        for f in [Some(files.json), files.pgm].into_iter().flatten() {
            let name = f.file_name().expect("file name").to_string_lossy().into_owned();
            ws.output(&name);
        }
        println!("heatmap of query {} against {} written", queries[0].id, corpus.id(*doc));
    }

    let mut used = inputs(&[("corpus", &corpus_path), ("queries", qpath), ("checkpoint", &ck_path)]);
    if let Some(p) = config.optional_input("qrels")? {
        used.insert("qrels".into(), p.to_path_buf());
    }
    ws.finish("analyze", config, used)?;
    Ok(())
}

const REPORTED: [&str; 4] = ["train_report.json", "alignment_q2d.json", "alignment_d2q.json", "lowrank.json"];

pub fn report(config: &RunConfig) -> CliResult<()> {
    let mut ws = Workspace::open(&config.out, "report")?;
    let mut names: Vec<String> = std::fs::read_dir(ws.dir())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| REPORTED.contains(&n.as_str()) || (n.starts_with("eval") && n.ends_with(".json")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Failure::missing(&ws.path("eval.json"), "train`, `retrieve`, `rerank` or `analyze"));
    }
    let mut all = BTreeMap::new();
    let mut text = String::new();
    for name in &names {
        let v: Value = ws.read_json(name, "build")?;
        let stem = name.trim_end_matches(".json").to_string();
        if name.starts_with("eval") {
            let r: EvalReport = serde_json::from_value(v.clone()).map_err(|e| Failure::io(format!("{name}: {e}")))?;
            writeln!(text, "{stem:<20} R@1 {:.4}  R@10 {:.4}  MRR@10 {:.4}  ({} queries)", r.recall_at_1, r.recall_at_10, r.mrr_at_10, r.queries)
        } else if name.starts_with("alignment") {
            let r: AlignmentReport = serde_json::from_value(v.clone()).map_err(|e| Failure::io(format!("{name}: {e}")))?;
            writeln!(text, "{stem:<20} hard {:.4}  soft {:.4}", r.overall_hard, r.overall_soft)
        } else if name == "lowrank.json" {
            let r: LowRankReport = serde_json::from_value(v.clone()).map_err(|e| Failure::io(format!("{name}: {e}")))?;
            writeln!(
                text,
                "{stem:<20} relative error mean {:.4} max {:.4}  within ceiling {}/{}",
                r.mean_relative_error,
                r.max_relative_error,
                r.within_ceiling,
                r.records.len()
            )
        } else {
            let r: TrainSummary = serde_json::from_value(v.clone()).map_err(|e| Failure::io(format!("{name}: {e}")))?;
            writeln!(
                text,
                "{stem:<20} {:?} {} examples, {} epochs, final loss {}",
                r.paradigm,
                r.examples,
                r.epochs,
                r.final_loss.map_or("-".into(), |l| format!("{l:.6}"))
            )
        }
        .expect("writing to a string");
        all.insert(stem, v);
    }
    ws.write_json("report.json", &all)?;
    ws.write_text("report.txt", &text)?;
    print!("{text}");
    ws.finish("report", config, Inputs::new())?;
    Ok(())
}

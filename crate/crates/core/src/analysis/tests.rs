use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::alignment::{align_exact_lexical, align_top1_q2d};
use crate::model::{ModelConfig, Paradigm};
use crate::retrieval::Document;

fn one_hot(ids: &[TokenId], size: usize) -> TokenMatrix {
    let rows: Vec<Vec<f64>> = ids
        .iter()
        .map(|&t| (0..size).map(|k| if k == t { 1.0 } else { 0.0 }).collect())
        .collect();
    TokenMatrix::from_vectors(&rows).unwrap()
}

fn lexical(doc: &[TokenId], query: &[TokenId]) -> AlignmentInstance {
    let a = align_exact_lexical(doc, query).unwrap();
    AlignmentInstance::new(doc.to_vec(), query.to_vec(), one_hot(doc, 12), one_hot(query, 12), a).unwrap()
}

fn flat_idf() -> Vec<f64> {
    (0..12).map(|t| t as f64 / 10.0).collect()
}

#[test]
fn equal_width_edges() {
    let b = IdfBuckets::equal_width(0.0, 1.0, 5).unwrap();
    assert_eq!(b.len(), 5);
    assert_eq!(b.bucket(0.0), 0);
    assert_eq!(b.bucket(0.2), 1);
    assert_eq!(b.bucket(0.99), 4);
    assert_eq!(b.bucket(1.0), 4);
    assert_eq!(b.bucket(-3.0), 0);
    assert_eq!(b.bucket(7.0), 4);
    let flat = IdfBuckets::over(&[2.0, 2.0], 2).unwrap();
    assert_eq!(flat.edges, vec![1.0, 2.0, 3.0]);
    assert!(IdfBuckets::from_edges(vec![0.0, 0.0]).is_err());
    assert!(IdfBuckets::from_edges(vec![1.0]).is_err());
}

#[test]
fn lexical_present_everywhere_is_one() {
    let q = vec![5, 6];
    let inst = vec![lexical(&[7, 5, 8], &q), lexical(&[5, 9], &q)];
    let rates = token_rates_q2d(&inst, &flat_idf()).unwrap();
    assert_eq!(rates[0].token, 5);
    assert_eq!(rates[0].hard, 1.0);
    assert_eq!(rates[1].hard, 0.0);
    assert_eq!(rates[1].soft, 0.0);
    let b = IdfBuckets::equal_width(0.0, 1.2, 2).unwrap();
    let report = match_rate_q2d(&inst, &flat_idf(), &b).unwrap();
    assert_eq!(report.hard_rate, vec![Some(1.0), Some(0.0)]);
    assert_eq!(report.counts, vec![1, 1]);
    assert!(report.to_text().contains("direction"));
}

#[test]
fn d2q_single_token_and_disjoint() {
    let same = vec![lexical(&[5], &[5])];
    let r = token_rates_d2q(&same, &flat_idf()).unwrap();
    assert_eq!((r[0].hard, r[0].soft), (1.0, 1.0));
    let disjoint = vec![lexical(&[5, 6], &[7, 8])];
    for r in token_rates_d2q(&disjoint, &flat_idf()).unwrap() {
        assert_eq!((r.hard, r.soft), (0.0, 0.0));
    }
}

#[test]
fn d2q_two_by_two_oracle() {
    let d = TokenMatrix::from_vectors(&[vec![1.0, 0.5], vec![-0.3, 2.0]]).unwrap();
    let q = TokenMatrix::from_vectors(&[vec![0.2, 1.0], vec![1.5, -0.5]]).unwrap();
    let a = align_top1_q2d(&d, &q).unwrap();
    let inst = AlignmentInstance::new(vec![5, 6], vec![6, 5], d, q, a).unwrap();
    let rates = token_rates_d2q(&[inst], &flat_idf()).unwrap();
    // row 0 (token 5) matches query column 1, row 1 (token 6) matches column 0
    let s: [[f64; 2]; 2] = [[1.0 * 0.2 + 0.5 * 1.0, 1.0 * 1.5 - 0.5 * 0.5], [-0.3 * 0.2 + 2.0, -0.3 * 1.5 - 1.0]];
    let row = |i: usize, j: usize| s[i][j].exp() / (s[i][0].exp() + s[i][1].exp());
    assert!((rates[0].soft - row(0, 1)).abs() < 1e-15);
    assert!((rates[1].soft - row(1, 0)).abs() < 1e-15);
}

fn toy_corpus() -> (Corpus, crate::encoding::Vocab) {
    let docs: Vec<Document> = ["a b c d", "b c e", "d a a f", "f e c"]
        .iter()
        .enumerate()
        .map(|(k, t)| Document { id: format!("d{k}"), text: t.to_string() })
        .collect();
    let vocab = Corpus::build_vocab(&docs, 20);
    (Corpus::new(docs, &vocab).unwrap(), vocab)
}

fn toy_model(p: Paradigm, c: &Corpus, vocab: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let config = ModelConfig { vocab_size: vocab, dim: 6, span_len: 3, query_len: 6, doc_len: 8 };
    Model::random(p, config, c.all_tokens(), &mut rng).unwrap()
}

#[test]
fn attention_rows_split_unit_mass() {
    let (c, v) = toy_corpus();
    for p in [Paradigm::Gr, Paradigm::GrPawa, Paradigm::GrNp] {
        let m = toy_model(p, &c, v.len());
        let q = v.tokenize_unpadded("c a e");
        let inst = alignment_instances(&m, &c, &q, &[0, 1, 2, 3], Direction::DocToQuery, Execution::Parallel).unwrap();
        for x in &inst {
            for (hit, miss) in x.row_masses().unwrap() {
                assert!((0.0..=1.0).contains(&hit));
                assert!((hit + miss - 1.0).abs() < 1e-9);
            }
        }
        let b = IdfBuckets::over(v.idf_values(), 5).unwrap();
        let r = match_rate_d2q(&inst, v.idf_values(), &b).unwrap();
        assert!(r.soft_rate.iter().flatten().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn mvdr_pipeline_runs_and_rejects_bad_input() {
    let (c, v) = toy_corpus();
    let m = toy_model(Paradigm::Mvdr, &c, v.len());
    let q = v.tokenize_unpadded("a c");
    let inst = alignment_instances(&m, &c, &q, &[0, 2], Direction::QueryToDoc, Execution::Sequential).unwrap();
    let b = IdfBuckets::over(v.idf_values(), 5).unwrap();
    let r = match_rate_q2d(&inst, v.idf_values(), &b).unwrap();
    assert_eq!(r.counts.iter().sum::<usize>(), 2);
    assert!(alignment_instances(&m, &c, &[PAD, PAD], &[0], Direction::QueryToDoc, Execution::Sequential).is_err());
    assert!(alignment_instances(&m, &c, &q, &[], Direction::QueryToDoc, Execution::Sequential).is_err());
}

#[test]
fn zero_w_has_no_residual() {
    let (c, v) = toy_corpus();
    let Model::Gr(mut gr) = toy_model(Paradigm::Gr, &c, v.len()) else { unreachable!() };
    gr.params.w = Matrix::zeros(6, 6);
    let m = Model::Gr(gr);
    let r = lowrank_scan(&m, &c, &[(v.tokenize_unpadded("a b e"), 0), (v.tokenize_unpadded("f"), 3)], Execution::Sequential)
        .unwrap();
    for rec in &r.records {
        assert_eq!(rec.residual_frobenius, 0.0);
        assert_eq!(rec.residual_one_inf, 0.0);
        assert_eq!(rec.relative_error, 0.0);
    }
    assert!(r.all_within_ceiling());
}

#[test]
fn scaling_sweep_shrinks_residual() {
    let (c, v) = toy_corpus();
    let Model::Gr(gr) = toy_model(Paradigm::Gr, &c, v.len()) else { unreachable!() };
    let w = gr.params.w.scaled(6.0);
    let q = gr.encode_query(&v.tokenize_unpadded("a c e f")).unwrap();
    let states = decoder_states_for(&gr, c.tokens(0));
    let sweep = scaling_sweep(&states, &q, &w, &[1.0, 0.5, 0.1, 0.01, 0.0]).unwrap();
    for p in sweep.windows(2) {
        assert!(p[1].residual_frobenius <= p[0].residual_frobenius);
        assert!(p[1].residual_one_inf <= p[0].residual_one_inf);
    }
    assert_eq!(sweep[4].residual_frobenius, 0.0);
}

fn decoder_states_for(gr: &crate::model::GrModel, doc: &[TokenId]) -> TokenMatrix {
    crate::relevance::decoder_states(&gr.identifier(doc).unwrap(), &gr.params).unwrap()
}

#[test]
fn heatmap_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let labels = |n: usize, p: &str| (0..n).map(|k| format!("{p}{k}")).collect::<Vec<_>>();

    let one = AlignmentMatrix::new(Matrix::filled(1, 1, 0.25), Strategy::Attention, Direction::DocToQuery).unwrap();
    let f = export_heatmap(&one, &labels(1, "d"), &labels(1, "q"), &dir.path().join("one.csv"), true).unwrap();
    let text = std::fs::read_to_string(&f.csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(f.json.exists());
    let pgm = std::fs::read(f.pgm.unwrap()).unwrap();
    assert_eq!(pgm, b"P5\n1 1\n255\n\x80");

    let m = Matrix::from_rows(&[vec![0.1, 0.7, 0.2], vec![1.0 / 3.0, 1e-17, 0.6666666666666666]]).unwrap();
    let a = AlignmentMatrix::new(m, Strategy::Attention, Direction::DocToQuery).unwrap();
    let f = export_heatmap(&a, &labels(2, "d"), &labels(3, "q"), &dir.path().join("a.csv"), true).unwrap();
    let (back, dl, ql) = AlignmentMatrix::read_csv(&f.csv).unwrap();
    assert_eq!(back.matrix, a.matrix);
    assert_eq!((dl, ql), (labels(2, "d"), labels(3, "q")));
    let pgm = std::fs::read(f.pgm.unwrap()).unwrap();
    let pixels = &pgm[pgm.len() - 6..];
    // (v - 1e-17) / (0.7 - 1e-17) * 255, rounded
    assert_eq!(pixels, &[36, 255, 73, 121, 0, 243]);

    assert!(export_heatmap(&a, &labels(1, "d"), &labels(3, "q"), &dir.path().join("bad.csv"), false).is_err());
    assert!(export_heatmap(&a, &labels(2, "d"), &labels(3, "q"), &dir.path().join("missing/x.csv"), false).is_err());
}

proptest! {
    #[test]
    fn lexical_rates_follow_presence(
        docs in prop::collection::vec(prop::collection::vec(5usize..12, 1..6), 1..5),
        query in prop::collection::vec(5usize..12, 1..5),
    ) {
        let inst: Vec<AlignmentInstance> = docs.iter().map(|d| lexical(d, &query)).collect();
        let rates = token_rates_q2d(&inst, &flat_idf()).unwrap();
        for r in rates {
            let present = docs.iter().filter(|d| d.contains(&r.token)).count() as f64 / docs.len() as f64;
            prop_assert_eq!(r.hard, present);
        }
    }

    #[test]
    fn residual_invariant_under_row_permutation(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 2..6),
        rot in 0usize..5,
    ) {
        let a = Matrix::from_rows(&rows).unwrap();
        let mut perm = rows.clone();
        let k = rot % perm.len();
        perm.rotate_left(k);
        let b = Matrix::from_rows(&perm).unwrap();
        let fa = crate::linalg::row_constant_rank_one(&a);
        let fb = crate::linalg::row_constant_rank_one(&b);
        prop_assert!((fa.residual_frobenius - fb.residual_frobenius).abs() < 1e-12);
        prop_assert!((fa.residual_one_inf - fb.residual_one_inf).abs() < 1e-12);
    }
}

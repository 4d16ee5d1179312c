use super::*;
use crate::alignment::{align_top1_q2d, Direction, Strategy};
use crate::encoding::{uniform_matrix, StoredDocument, PAD};
use proptest::prelude::{prop_assert, proptest};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_params(rng: &mut ChaCha8Rng, vocab: usize, d: usize) -> DecoderParams {
    let table = EmbeddingTable::random(vocab, d, rng);
    let decoder = SelfAttention::random(d, rng);
    let w = uniform_matrix(d, d, rng);
    let w_v = uniform_matrix(d, d, rng);
    DecoderParams::new(table, decoder, w, w_v).unwrap()
}

fn random_ids(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(RESERVED.len()..vocab)).collect()
}

fn tm(rows: &[&[f64]]) -> TokenMatrix {
    TokenMatrix::from_vectors(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Scalar evaluation of the cross-attention forward pass: for each step,
/// attention weights over query tokens, the head input `h_i`, and the
/// target logit `e_{d_i} . h_i`.
fn forward_oracle(doc_ids: &[TokenId], q: &TokenMatrix, p: &DecoderParams) -> (Vec<Vec<f64>>, Vec<f64>) {
    let states = decoder_states(doc_ids, p).unwrap();
    let d = p.dim();
    let n = q.len();
    let mut hidden = Vec::new();
    let mut logits = Vec::new();
    for (i, &t) in doc_ids.iter().enumerate() {
        let s = states.vector(i);
        let mut scores = vec![0.0; n];
        for (j, score) in scores.iter_mut().enumerate() {
            // q_j^T W s
            for r in 0..d {
                for c in 0..d {
                    *score += q.vector(j)[r] * p.w.get(r, c) * s[c];
                }
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut ctx = vec![0.0; d];
        for j in 0..n {
            for r in 0..d {
                ctx[r] += exps[j] / total * q.vector(j)[r];
            }
        }
        let mut h = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                h[r] += p.w_v.get(r, c) * ctx[c];
            }
        }
        let e = p.table.vector(t).unwrap();
        logits.push((0..d).map(|r| e[r] * h[r]).sum());
        hidden.push(h);
    }
    (hidden, logits)
}

#[test]
fn unified_examples() {
    let i2 = tm(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let ones = AlignmentMatrix::new(Matrix::filled(2, 2, 1.0), Strategy::SingleVector, Direction::Symmetric).unwrap();
    assert_eq!(rel_unified(&i2, &i2, &ones).unwrap().value, 2.0);
    assert_eq!(rel_unified(&i2, &i2, &ones.clone().normalized()).unwrap().value, 0.5);
    let mut zero = ones;
    zero.z = 0.0;
    assert!(rel_unified(&i2, &i2, &zero).is_err());
}

#[test]
fn unified_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = TokenMatrix::new(uniform_matrix(3, 4, &mut rng));
    let q = TokenMatrix::new(uniform_matrix(2, 4, &mut rng));
    let a = AlignmentMatrix::new(uniform_matrix(3, 2, &mut rng).scaled(-1.0), Strategy::Salience, Direction::Symmetric);
    assert!(a.is_err());
    let raw = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.25).unwrap();
    let a = AlignmentMatrix::new(raw, Strategy::Salience, Direction::Symmetric).unwrap();
    let mut expect = 0.0;
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for t in 0..4 {
                s += d.vector(i)[t] * q.vector(j)[t];
            }
            expect += s * a.get(i, j);
        }
    }
    let r = rel_unified(&d, &q, &a).unwrap();
    assert!((r.value - expect).abs() < 1e-14);
    assert!(rel_unified(&q, &q, &a).is_err());
}

#[test]
fn sum_max_identity_small() {
    let d = tm(&[&[2.0, 0.0], &[1.0, 3.0]]);
    let q = tm(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, -1.0]]);
    let r = rel_unified(&d, &q, &align_top1_q2d(&d, &q).unwrap()).unwrap();
    assert_eq!(r.value, 2.0 + 3.0 - 2.0);
}

#[test]
fn gr_uniform_attention_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = random_params(&mut rng, 12, 4);
    p.w = Matrix::zeros(4, 4);
    p.w_v = Matrix::identity(4);
    let q = TokenMatrix::new(uniform_matrix(3, 4, &mut rng));
    let ids = [5, 9, 11];
    let mut mean = vec![0.0; 4];
    for j in 0..3 {
        crate::linalg::axpy(&mut mean, 1.0 / 3.0, q.vector(j));
    }
    let expect: f64 = ids.iter().map(|&v| dot(p.table.vector(v).unwrap(), &mean)).sum();
    assert!((rel_gr(&ids, &q, &p).unwrap().value - expect).abs() < 1e-14);
}

#[test]
fn gr_single_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_params(&mut rng, 9, 3);
    let q = TokenMatrix::new(uniform_matrix(1, 3, &mut rng));
    let expect = dot(p.table.vector(7).unwrap(), &p.w_v.mul_vec(q.vector(0)).unwrap());
    assert!((rel_gr(&[7], &q, &p).unwrap().value - expect).abs() < 1e-15);
    assert!(matches!(rel_gr(&[], &q, &p), Err(Error::Empty(_))));
}

#[test]
fn shift_right_prepends_bos() {
    assert_eq!(shift_right(&[7, 8, 9]), vec![BOS, 7, 8]);
    assert_eq!(shift_right(&[7]), vec![BOS]);
}

proptest! {
    #[test]
    fn central_identity(seed in 0u64..100_000, d in 1usize..17, m in 1usize..9, n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, 20, d);
        let ids = random_ids(&mut rng, 20, m);
        let q = TokenMatrix::new(uniform_matrix(n, d, &mut rng).scaled(2.0));
        let (_, logits) = forward_oracle(&ids, &q, &p);
        let forward: f64 = logits.iter().sum();
        let r = rel_gr(&ids, &q, &p).unwrap();
        prop_assert!((forward - r.value).abs() <= 1e-9);
        prop_assert!((r.per_position.iter().sum::<f64>() - r.value).abs() <= 1e-9);
        prop_assert!((r.per_query_token.iter().sum::<f64>() - r.value).abs() <= 1e-9);
        for (i, l) in logits.iter().enumerate() {
            prop_assert!((r.per_position[i] - l).abs() <= 1e-9);
        }
    }

    #[test]
    fn sampled_negatives_are_valid(seed in 0u64..10_000, count in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = [5, 6, 9];
        let neg = sample_negatives(20, &targets, count, &mut rng).unwrap();
        prop_assert!(!neg.is_empty());
        prop_assert!(neg.len() <= count);
        prop_assert!(neg.iter().all(|t| *t >= RESERVED.len() && *t < 20 && !targets.contains(t)));
        prop_assert!(neg.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn ce_degenerate_vocab() {
    let table = EmbeddingTable::new(Matrix::filled(1, 3, 0.7));
    let hidden = Matrix::filled(2, 3, 1.3);
    let ce = ce_from_hidden(&hidden, &[0, 0], &table, &Negatives::Full).unwrap();
    assert_eq!(ce.per_position, vec![0.0, 0.0]);
}

#[test]
fn ce_equal_logits_is_log_vocab() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = EmbeddingTable::random(17, 3, &mut rng);
    let hidden = Matrix::zeros(2, 3);
    let ce = ce_from_hidden(&hidden, &[6, 9], &table, &Negatives::Full).unwrap();
    for l in ce.per_position {
        assert!((l - 17f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn ce_matches_materialized_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_params(&mut rng, 15, 4);
    let ids = random_ids(&mut rng, 15, 4);
    let q = TokenMatrix::new(uniform_matrix(3, 4, &mut rng));
    let (hidden, _) = forward_oracle(&ids, &q, &p);
    let mut expect = 0.0;
    for (i, &t) in ids.iter().enumerate() {
        let z: Vec<f64> = (0..15).map(|v| dot(p.table.vector(v).unwrap(), &hidden[i])).collect();
        let norm: f64 = z.iter().map(|x| x.exp()).sum();
        expect += -(z[t].exp() / norm).ln();
    }
    let ce = loss_ce_teacher_forcing(&ids, &q, &p, &Negatives::Full).unwrap();
    assert!((ce.loss - expect).abs() < 1e-12);

    let neg = sample_negatives(15, &ids, 4, &mut rng).unwrap();
    let sampled = loss_ce_teacher_forcing(&ids, &q, &p, &Negatives::Sampled(neg.clone())).unwrap();
    let mut expect = 0.0;
    for (i, &t) in ids.iter().enumerate() {
        let cand: Vec<TokenId> = std::iter::once(t).chain(neg.iter().copied()).collect();
        let z: Vec<f64> = cand.iter().map(|&v| dot(p.table.vector(v).unwrap(), &hidden[i])).collect();
        let norm: f64 = z.iter().map(|x| x.exp()).sum();
        expect += -(z[0].exp() / norm).ln();
    }
    assert!((sampled.loss - expect).abs() < 1e-12);
    assert!(matches!(
        loss_ce_teacher_forcing(&ids, &q, &p, &Negatives::Sampled(vec![])),
        Err(Error::Empty(_))
    ));
    assert!(loss_ce_teacher_forcing(&ids, &q, &p, &Negatives::Sampled(vec![ids[0]])).is_err());
}

#[test]
fn proportionality_within_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = uniform_matrix(1, 100, &mut rng).scaled(5.0).into_vec();
    for eps in [1e-2, 1e-3] {
        for t in [0, 17, 99] {
            let p = proportionality(&logits, t, eps).unwrap();
            assert!(p.deviation <= p.bound);
            assert!(p.centered_deviation <= p.centered_bound + 1e-15);
        }
    }
}

#[test]
fn proportionality_shifted_logits() {
    // Constant logits: CE is ln|V| exactly, the literal form is off by eps * c.
    let p = proportionality(&[4.0; 10], 3, 1e-3).unwrap();
    assert!((p.ce - 10f64.ln()).abs() < 1e-15);
    assert!((p.deviation - 4e-3).abs() < 1e-15);
    assert!(p.centered_deviation < 1e-15);
    // Two logits {a, -a}: CE = ln(1 + e^{-2 eps a}) for the larger one.
    let (a, eps) = (3.0, 1e-2);
    let p = proportionality(&[a, -a], 0, eps).unwrap();
    let exact = (1.0 + (-2.0 * eps * a).exp()).ln();
    assert!((p.ce - exact).abs() < 1e-15);
    assert!((p.centered_deviation - (exact - (2f64.ln() - eps * a)).abs()).abs() < 1e-15);
    assert!(p.centered_deviation <= p.centered_bound);
}

#[test]
fn contrastive_examples() {
    assert_eq!(loss_contrastive(&[3.7], 0).unwrap(), 0.0);
    assert!((loss_contrastive(&[1.5, 1.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
    let s = [0.3, -1.2, 2.0, 0.7];
    let norm: f64 = s.iter().map(|x: &f64| x.exp()).sum();
    assert!((loss_contrastive(&s, 2).unwrap() - -(s[2].exp() / norm).ln()).abs() < 1e-14);
    assert!(matches!(loss_contrastive(&[], 0), Err(Error::Empty(_))));
    let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert!((loss_in_batch(&m).unwrap() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn pawa_identity_collapses_to_gr() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_params(&mut rng, 12, 4);
    let ids = random_ids(&mut rng, 12, 3);
    let q = TokenMatrix::new(uniform_matrix(5, 4, &mut rng));
    let bank = PawaBank::identity(3, 12, 4);
    let latents = embed_static(&ids, &p.table).unwrap().vectors;
    assert_eq!(rel_pawa(&ids, &q, &p, &bank, &latents).unwrap(), rel_gr(&ids, &q, &p).unwrap());
    let zero = TokenMatrix::new(Matrix::zeros(3, 4));
    assert_eq!(rel_pawa(&ids, &q, &p, &bank, &zero).unwrap().value, 0.0);
    let short = PawaBank::identity(2, 12, 4);
    assert!(matches!(
        rel_pawa(&ids, &q, &p, &short, &latents),
        Err(Error::PositionOutOfRange { .. })
    ));
}

#[test]
fn pawa_matches_projected_logit_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_params(&mut rng, 10, 3);
    let ids = random_ids(&mut rng, 10, 2);
    let q = TokenMatrix::new(uniform_matrix(4, 3, &mut rng));
    let bank = PawaBank::random(2, 10, 3, &mut rng);
    let latents = TokenMatrix::new(uniform_matrix(2, 3, &mut rng));
    let (hidden, _) = forward_oracle(&ids, &q, &p);
    let mut expect = 0.0;
    for (i, &v) in ids.iter().enumerate() {
        let e = bank.projection(i, v).unwrap();
        let l = latents.vector(i);
        // d'^T E^T h
        for r in 0..3 {
            for c in 0..3 {
                expect += l[c] * e.get(r, c) * hidden[i][r];
            }
        }
    }
    assert!((rel_pawa(&ids, &q, &p, &bank, &latents).unwrap().value - expect).abs() < 1e-12);
}

#[test]
fn np_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = random_params(&mut rng, 12, 4);
    let docs = vec![random_ids(&mut rng, 12, 3), random_ids(&mut rng, 12, 2)];
    let q = TokenMatrix::new(uniform_matrix(3, 4, &mut rng));
    let store = ContextualStore::build(&docs, |ids| Ok(embed_static(ids, &p.table)?.vectors)).unwrap();
    let np = rel_np(1, &q, &store, &p).unwrap();
    p.w_v = Matrix::identity(4);
    assert_eq!(np, rel_gr(&docs[1], &q, &p).unwrap());
    assert!(matches!(rel_np(2, &q, &store, &p), Err(Error::UnknownDocument(_))));

    let zero = ContextualStore::from_documents(vec![StoredDocument {
        ids: docs[0].clone(),
        vectors: TokenMatrix::new(Matrix::zeros(3, 4)),
    }])
    .unwrap();
    assert_eq!(rel_np(0, &q, &zero, &p).unwrap().value, 0.0);
}

#[test]
fn np_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = random_params(&mut rng, 12, 3);
    let ids = random_ids(&mut rng, 12, 3);
    let vectors = TokenMatrix::new(uniform_matrix(3, 3, &mut rng));
    let store = ContextualStore::from_documents(vec![StoredDocument { ids: ids.clone(), vectors: vectors.clone() }]).unwrap();
    let q = TokenMatrix::new(uniform_matrix(2, 3, &mut rng));
    let a = align_attention(&decoder_states(&ids, &p).unwrap(), &q, &p.w).unwrap();
    let mut expect = 0.0;
    for i in 0..3 {
        for j in 0..2 {
            let s: f64 = (0..3).map(|t| vectors.vector(i)[t] * q.vector(j)[t]).sum();
            expect += s * a.get(i, j);
        }
    }
    assert!((rel_np(0, &q, &store, &p).unwrap().value - expect).abs() < 1e-14);
}

#[test]
fn padding_in_identifier_is_masked_from_decoder_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random_params(&mut rng, 12, 3);
    let q = TokenMatrix::new(uniform_matrix(2, 3, &mut rng));
    // PAD at the end only feeds the (unused) step after the identifier.
    let a = rel_gr(&[6, 7], &q, &p).unwrap();
    let b = rel_gr(&[6, 7, PAD], &q, &p).unwrap();
    assert_eq!(a.per_position[..2], b.per_position[..2]);
}

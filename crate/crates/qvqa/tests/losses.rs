//! Contrastive and language-modeling loss examples, buffer semantics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qvqa::losses::{
    cl_loss, combine_lm, lm_loss, qcl_loss, sq_similarity, total_loss, LossWeights,
    NegativeBuffers, TAU_INIT, TAU_MAX, TAU_MIN,
};
use qvqa::tensor::{Tape, Tensor, S};
use qvqa::verify::{oracle_cl, oracle_cosine, oracle_qcl, oracle_sq};

fn approx(a: S, b: S, tol: S) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn sq_picks_the_best_matching_row() {
    let mut tape = Tape::new();
    // Rows e1 and e2; text is e2: the max over rows is the exact match.
    let q = tape.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let t = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
    let s = sq_similarity(&mut tape, q, t).unwrap();
    assert!(approx(tape.value(s).item(), 1.0, 1e-5));

    let q = tape.constant(Tensor::matrix(1, 3, vec![0.0, -1.0, 0.0]).unwrap());
    let s = sq_similarity(&mut tape, q, t).unwrap();
    assert!(approx(tape.value(s).item(), -1.0, 1e-5));
}

#[test]
fn sq_matches_brute_force_over_all_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let q = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let t = Tensor::randn(&[4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let qi = tape.constant(q.clone());
        let ti = tape.constant(t.clone());
        let s = sq_similarity(&mut tape, qi, ti).unwrap();
        assert!(approx(tape.value(s).item(), oracle_sq(&q, t.data()), 1e-6));
    }
}

#[test]
fn qcl_single_pair_without_buffer_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let t = tape.constant(Tensor::randn(&[4], 1.0, &mut rng));
    let tau = tape.constant(Tensor::scalar(TAU_INIT));
    let loss = qcl_loss(&mut tape, &[q], &[t], &NegativeBuffers::new(8), tau).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
    let loss = cl_loss(&mut tape, &[t], &[t], &NegativeBuffers::new(8), tau).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn equal_similarities_give_ln_2() {
    let f = Tensor::vector(vec![0.3, -0.5, 0.8, 0.1]);
    let mut tape = Tape::new();
    let nodes: Vec<_> = (0..2).map(|_| tape.constant(f.clone())).collect();
    let tau = tape.constant(Tensor::scalar(0.2));
    let q = Tensor::matrix(2, 4, f.data().iter().chain(f.data()).copied().collect()).unwrap();
    let q0 = tape.constant(q.clone());
    let q1 = tape.constant(q);
    let loss = qcl_loss(&mut tape, &[q0, q1], &nodes, &NegativeBuffers::new(8), tau).unwrap();
    assert!(approx(tape.value(loss).item(), (2.0 as S).ln(), 1e-6));
}

#[test]
fn orthonormal_identity_cl_matches_the_closed_form() {
    // V_i == T_i == e_i: similarity matrix [[1, 0], [0, 1]] up to the norm
    // guard; each softmax term is ln(1 + exp(-1/tau)).
    let tau: S = 0.07;
    let mut tape = Tape::new();
    let e1 = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let e2 = tape.constant(Tensor::vector(vec![0.0, 1.0]));
    let tn = tape.constant(Tensor::scalar(tau));
    let loss = cl_loss(&mut tape, &[e1, e2], &[e1, e2], &NegativeBuffers::new(4), tn).unwrap();
    // The 1e-8 norm guard nudges the diagonal below 1; fold it in.
    let s = 1.0 / ((1.0 + 1e-8) * (1.0 + 1e-8));
    let want = ((0.0 as S).exp() + (-s / tau).exp()).ln();
    assert!(approx(tape.value(loss).item(), want, 1e-6), "{} vs {want}", tape.value(loss).item());
}

#[test]
fn buffered_losses_match_the_scalar_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (b, n, m, d) = (3usize, 2usize, 4usize, 5usize);
    let q: Vec<Tensor> = (0..b).map(|_| Tensor::randn(&[m, d], 1.0, &mut rng)).collect();
    let v: Vec<Tensor> = (0..b).map(|_| Tensor::randn(&[d], 1.0, &mut rng)).collect();
    let t: Vec<Tensor> = (0..b).map(|_| Tensor::randn(&[d], 1.0, &mut rng)).collect();
    let mut buffers = NegativeBuffers::new(8);
    let bt: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[d], 1.0, &mut rng)).collect();
    let bv: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[d], 1.0, &mut rng)).collect();
    let bq: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[m, d], 1.0, &mut rng)).collect();
    buffers.push(&bt, &bv, &bq);

    let tau: S = 1.0;
    let mut tape = Tape::new();
    let qi: Vec<_> = q.iter().map(|x| tape.constant(x.clone())).collect();
    let vi: Vec<_> = v.iter().map(|x| tape.constant(x.clone())).collect();
    let ti: Vec<_> = t.iter().map(|x| tape.constant(x.clone())).collect();
    let tn = tape.constant(Tensor::scalar(tau));
    let got_q = qcl_loss(&mut tape, &qi, &ti, &buffers, tn).unwrap();
    let got_c = cl_loss(&mut tape, &vi, &ti, &buffers, tn).unwrap();

    let tv: Vec<Vec<S>> = t.iter().map(|x| x.data().to_vec()).collect();
    let vv: Vec<Vec<S>> = v.iter().map(|x| x.data().to_vec()).collect();
    let btv: Vec<Vec<S>> = bt.iter().map(|x| x.data().to_vec()).collect();
    let bvv: Vec<Vec<S>> = bv.iter().map(|x| x.data().to_vec()).collect();
    assert!(approx(tape.value(got_q).item(), oracle_qcl(&q, &tv, &bq, &btv, tau), 1e-6));
    assert!(approx(tape.value(got_c).item(), oracle_cl(&vv, &tv, &bvv, &btv, tau), 1e-6));
}

#[test]
fn lm_loss_on_uniform_and_peaked_logits() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(1, 10, vec![0.0; 10]).unwrap());
    let loss = lm_loss(&mut tape, logits, &[4], &[true]).unwrap();
    assert!(approx(tape.value(loss).item(), (10.0 as S).ln(), 1e-5));

    let mut peaked = vec![0.0; 10];
    peaked[4] = 1000.0;
    let logits = tape.constant(Tensor::matrix(1, 10, peaked).unwrap());
    let loss = lm_loss(&mut tape, logits, &[4], &[true]).unwrap();
    assert!(tape.value(loss).item().abs() < 1e-5);
}

#[test]
fn lm_loss_matches_a_scalar_softmax_oracle() {
    let rows = vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.7, 1.5, 0.2, -0.4];
    let targets = [2usize, 0, 1];
    let mask = [true, false, true];
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(3, 3, rows.clone()).unwrap());
    let loss = lm_loss(&mut tape, logits, &targets, &mask).unwrap();
    let mut want = 0.0;
    for i in [0usize, 2] {
        let row = &rows[i * 3..(i + 1) * 3];
        let z: S = row.iter().map(|v| v.exp()).sum();
        want += z.ln() - row[targets[i]];
    }
    want /= 2.0;
    assert!(approx(tape.value(loss).item(), want, 1e-5));
}

#[test]
fn lm_loss_averages_only_unmasked_positions() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
    let loss = lm_loss(&mut tape, logits, &[1, 2], &[true, false]).unwrap();
    assert!(approx(tape.value(loss).item(), (4.0 as S).ln(), 1e-5));
    assert!(lm_loss(&mut tape, logits, &[1, 2], &[false, false]).is_err());
}

#[test]
fn lm_combination_arithmetic_matches_the_presets() {
    let cases: [(S, S, S, LossWeights, S); 3] = [
        (1.0, 2.0, 3.0, LossWeights::report_gen(), 20.0),
        (1.0, 1.0, 1.0, LossWeights { lambda: 1.0, lambda_c: 1.0, lambda_m: 1.0, lambda_f: 1.0 }, 3.0),
        (0.5, 0.25, 0.1, LossWeights::visual(), 2.15),
    ];
    for (c, m, f, w, want) in cases {
        let mut tape = Tape::new();
        let ci = tape.constant(Tensor::scalar(c));
        let mi = tape.constant(Tensor::scalar(m));
        let fi = tape.constant(Tensor::scalar(f));
        let got = combine_lm(&mut tape, ci, mi, fi, &w).unwrap();
        assert!(approx(tape.value(got).item(), want, 1e-6));
    }
}

#[test]
fn total_loss_arithmetic() {
    let cases: [(S, S, S, S, S); 3] =
        [(0.5, 0.7, 2.0, 1.0, 3.2), (0.0, 0.0, 0.0, 1.0, 0.0), (0.3, 0.4, 0.5, 2.0, 1.5)];
    for (cl, qcl, lm, lambda, want) in cases {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(cl));
        let b = tape.constant(Tensor::scalar(qcl));
        let c = tape.constant(Tensor::scalar(lm));
        let got = total_loss(&mut tape, a, b, c, lambda).unwrap();
        assert!(approx(tape.value(got).item(), want, 1e-6));
    }
}

#[test]
fn weights_validate_and_presets_are_the_published_pairs() {
    let r = LossWeights::report_gen();
    assert_eq!((r.lambda, r.lambda_c, r.lambda_m, r.lambda_f), (1.0, 9.0, 1.0, 3.0));
    let v = LossWeights::visual();
    assert_eq!((v.lambda, v.lambda_c, v.lambda_m, v.lambda_f), (1.0, 1.0, 3.0, 9.0));
    assert!(LossWeights { lambda: -1.0, ..r }.validate().is_err());
    assert!((TAU_MIN, TAU_MAX, TAU_INIT) == (0.01, 1.0, 0.07));
}

#[test]
fn buffer_fifo_over_three_pushes_of_two() {
    let mut buffers = NegativeBuffers::new(4);
    let entry = |v: S| {
        (
            Tensor::vector(vec![v]),
            Tensor::vector(vec![v]),
            Tensor::matrix(1, 1, vec![v]).unwrap(),
        )
    };
    for batch in 0..3 {
        let (t0, v0, q0) = entry(2.0 * batch as S);
        let (t1, v1, q1) = entry(2.0 * batch as S + 1.0);
        buffers.push(&[t0, t1], &[v0, v1], &[q0, q1]);
    }
    let got: Vec<S> = buffers.text().map(|t| t.data()[0]).collect();
    assert_eq!(got, vec![2.0, 3.0, 4.0, 5.0]);
    assert_eq!(buffers.len(), 4);
}

#[test]
fn buffer_holds_a_full_batch_under_paper_sizes() {
    let mut buffers = NegativeBuffers::new(100);
    let t: Vec<Tensor> = (0..25).map(|i| Tensor::vector(vec![i as S])).collect();
    buffers.push(&t.clone(), &t.clone(), &t);
    assert_eq!(buffers.len(), 25);
}

#[test]
fn zero_capacity_buffer_reduces_to_in_batch_infonce() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let v: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[4], 1.0, &mut rng)).collect();
    let t: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[4], 1.0, &mut rng)).collect();
    let mut empty = NegativeBuffers::new(0);
    empty.push(&v.clone(), &v.clone(), &v.clone());
    assert!(empty.is_empty());

    let mut tape = Tape::new();
    let vi: Vec<_> = v.iter().map(|x| tape.constant(x.clone())).collect();
    let ti: Vec<_> = t.iter().map(|x| tape.constant(x.clone())).collect();
    let tau = tape.constant(Tensor::scalar(0.5));
    let with_empty = cl_loss(&mut tape, &vi, &ti, &empty, tau).unwrap();
    let fresh = cl_loss(&mut tape, &vi, &ti, &NegativeBuffers::new(16), tau).unwrap();
    assert_eq!(tape.value(with_empty).item(), tape.value(fresh).item());
}

#[test]
fn cosine_oracle_agrees_with_tape_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for _ in 0..20 {
        let a = Tensor::randn(&[6], 1.0, &mut rng);
        let b = Tensor::randn(&[6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ai = tape.constant(a.clone());
        let bi = tape.constant(b.clone());
        let c = tape.cosine_sim(ai, bi).unwrap();
        assert!(approx(tape.value(c).item(), oracle_cosine(a.data(), b.data()), 1e-6));
    }
}

//! Self-check harness behind `qvqa verify`: gradient finite-difference
//! sweeps, closed-form loss identities, independent scalar-loop oracles for
//! the contrastive losses, buffer semantics, and metric oracles. A deliberate
//! sign-flip mutant of the contrastive term doubles as a sensitivity check:
//! the suite passes only if the mutant is caught.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    cl_loss, combine_lm, qcl_loss, total_loss, LossWeights, NegativeBuffers,
};
use crate::metrics::{bleu, retrieval_accuracy, rouge_l_beta};
use crate::tensor::gradcheck::{default_eps, default_tol, grad_check};
use crate::tensor::{Params, Tape, Tensor, S};

pub const SUITES: [&str; 4] = ["gradients", "losses", "buffers", "metrics"];

#[derive(Debug, Clone)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from(
        suite: &'static str,
        name: impl Into<String>,
        passed: bool,
        detail: impl Into<String>,
    ) -> Self {
        Check { suite, name: name.into(), passed, detail: detail.into() }
    }
}

/// Runs the requested suites (all of them when `only` is `None`).
pub fn run(only: Option<&str>) -> Result<Vec<Check>> {
    if let Some(s) = only {
        if !SUITES.contains(&s) {
            return Err(Error::Invalid(format!(
                "unknown suite {s:?}; available: {}",
                SUITES.join(", ")
            )));
        }
    }
    let mut checks = Vec::new();
    let want = |s: &str| only.is_none_or(|o| o == s);
    if want("gradients") {
        checks.extend(gradient_suite(20)?);
    }
    if want("losses") {
        checks.extend(loss_suite()?);
    }
    if want("buffers") {
        checks.extend(buffer_suite()?);
    }
    if want("metrics") {
        checks.extend(metric_suite()?);
    }
    Ok(checks)
}

// ── scalar-loop oracles ──────────────────────────────────────────────
// Written independently of the tape ops: plain host arithmetic, explicit
// loops, same 1e-8 norm guard and log-sum-exp stabilization.

pub fn oracle_cosine(a: &[S], b: &[S]) -> S {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / ((na.sqrt() + 1.0e-8) * (nb.sqrt() + 1.0e-8))
}

pub fn oracle_sq(q: &Tensor, t: &[S]) -> S {
    let d = q.cols();
    let mut best = S::NEG_INFINITY;
    for l in 0..q.rows() {
        let s = oracle_cosine(&q.data()[l * d..(l + 1) * d], t);
        if s > best {
            best = s;
        }
    }
    best
}

fn oracle_lse(xs: &[S]) -> S {
    let m = xs.iter().cloned().fold(S::NEG_INFINITY, S::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<S>().ln()
}

fn oracle_term(sims: &[S], pos: usize, tau: S, sign_flip: bool) -> S {
    let scaled: Vec<S> = sims.iter().map(|s| s / tau).collect();
    if sign_flip {
        oracle_lse(&scaled) + scaled[pos]
    } else {
        oracle_lse(&scaled) - scaled[pos]
    }
}

/// Symmetric buffered InfoNCE over precomputed pairwise similarities.
/// `sim(i, j)` scores feature `i` (in-batch, or buffered for `i ≥ B`)
/// against text `j` under the same indexing.
fn oracle_info_nce(b: usize, n_buf: usize, sim: impl Fn(usize, usize) -> S, tau: S, flip: bool) -> S {
    let mut total = 0.0;
    for i in 0..b {
        let sims_t: Vec<S> = (0..b + n_buf).map(|j| sim(i, j)).collect();
        total += oracle_term(&sims_t, i, tau, flip);
        let sims_f: Vec<S> = (0..b + n_buf).map(|j| sim(j, i)).collect();
        total += oracle_term(&sims_f, i, tau, flip);
    }
    total / (2.0 * b as S)
}

pub fn oracle_cl(v: &[Vec<S>], t: &[Vec<S>], buf_v: &[Vec<S>], buf_t: &[Vec<S>], tau: S) -> S {
    let b = v.len();
    let feat = |i: usize| if i < b { &v[i] } else { &buf_v[i - b] };
    let text = |j: usize| if j < b { &t[j] } else { &buf_t[j - b] };
    oracle_info_nce(b, buf_v.len(), |i, j| oracle_cosine(feat(i), text(j)), tau, false)
}

pub fn oracle_qcl(q: &[Tensor], t: &[Vec<S>], buf_q: &[Tensor], buf_t: &[Vec<S>], tau: S) -> S {
    let b = q.len();
    let feat = |i: usize| if i < b { &q[i] } else { &buf_q[i - b] };
    let text = |j: usize| if j < b { &t[j] } else { &buf_t[j - b] };
    oracle_info_nce(b, buf_q.len(), |i, j| oracle_sq(feat(i), text(j)), tau, false)
}

/// Sign-flipped mutant of the QCL oracle. Used only to prove the oracle
/// comparison has teeth.
pub fn mutant_qcl(q: &[Tensor], t: &[Vec<S>], buf_q: &[Tensor], buf_t: &[Vec<S>], tau: S) -> S {
    let b = q.len();
    let feat = |i: usize| if i < b { &q[i] } else { &buf_q[i - b] };
    let text = |j: usize| if j < b { &t[j] } else { &buf_t[j - b] };
    oracle_info_nce(b, buf_q.len(), |i, j| oracle_sq(feat(i), text(j)), tau, true)
}

// ── random fixtures ──────────────────────────────────────────────────

struct ContrastiveCase {
    q: Vec<Tensor>,
    v: Vec<Vec<S>>,
    t: Vec<Vec<S>>,
    buffers: NegativeBuffers,
    tau: S,
}

fn random_case(rng: &mut ChaCha8Rng) -> ContrastiveCase {
    let b = rng.random_range(1..=3);
    let n_buf = [0usize, 2][rng.random_range(0..2)];
    let m = [2usize, 4][rng.random_range(0..2)];
    let d = [4usize, 8][rng.random_range(0..2)];
    let q: Vec<Tensor> = (0..b).map(|_| Tensor::randn(&[m, d], 1.0, rng)).collect();
    let v: Vec<Vec<S>> = (0..b).map(|_| Tensor::randn(&[d], 1.0, rng).data().to_vec()).collect();
    let t: Vec<Vec<S>> = (0..b).map(|_| Tensor::randn(&[d], 1.0, rng).data().to_vec()).collect();
    let mut buffers = NegativeBuffers::new(16);
    if n_buf > 0 {
        let bt: Vec<Tensor> = (0..n_buf).map(|_| Tensor::randn(&[d], 1.0, rng)).collect();
        let bv: Vec<Tensor> = (0..n_buf).map(|_| Tensor::randn(&[d], 1.0, rng)).collect();
        let bq: Vec<Tensor> = (0..n_buf).map(|_| Tensor::randn(&[m, d], 1.0, rng)).collect();
        buffers.push(&bt, &bv, &bq);
    }
    // Kept away from zero: finite differences of 1/τ terms lose accuracy
    // as the curvature blows up.
    let tau = 0.5 + 0.5 * rng.random::<S>();
    ContrastiveCase { q, v, t, buffers, tau }
}

fn tape_cl(case: &ContrastiveCase) -> Result<S> {
    let mut tape = Tape::new();
    let v: Vec<_> = case.v.iter().map(|x| tape.constant(Tensor::vector(x.clone()))).collect();
    let t: Vec<_> = case.t.iter().map(|x| tape.constant(Tensor::vector(x.clone()))).collect();
    let tau = tape.constant(Tensor::scalar(case.tau));
    let loss = cl_loss(&mut tape, &v, &t, &case.buffers, tau)?;
    Ok(tape.value(loss).item())
}

fn tape_qcl(case: &ContrastiveCase) -> Result<S> {
    let mut tape = Tape::new();
    let q: Vec<_> = case.q.iter().map(|x| tape.constant(x.clone())).collect();
    let t: Vec<_> = case.t.iter().map(|x| tape.constant(Tensor::vector(x.clone()))).collect();
    let tau = tape.constant(Tensor::scalar(case.tau));
    let loss = qcl_loss(&mut tape, &q, &t, &case.buffers, tau)?;
    Ok(tape.value(loss).item())
}

fn buffer_vecs(buffers: &NegativeBuffers) -> (Vec<Vec<S>>, Vec<Vec<S>>, Vec<Tensor>) {
    let bt = buffers.text().map(|t| t.data().to_vec()).collect();
    let bv = buffers.visual().map(|t| t.data().to_vec()).collect();
    let bq = buffers.quasi().cloned().collect();
    (bt, bv, bq)
}

// ── gradient suite ───────────────────────────────────────────────────

/// Finite-difference checks of the contrastive losses, the LM loss, and the
/// combined objective over `cases` random shapes each.
pub fn gradient_suite(cases: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9fad);
    let (eps, tol) = (default_eps(), default_tol());
    let mut worst: [(S, String); 4] = std::array::from_fn(|_| (0.0, String::new()));
    let names = ["grad qcl", "grad cl", "grad lm", "grad total"];
    for case_ix in 0..cases {
        let case = random_case(&mut rng);
        let b = case.q.len();
        let (m, d) = (case.q[0].rows(), case.q[0].cols());
        let buffers = case.buffers.clone();
        let tau = case.tau;

        let mut params = Params::new();
        for (i, q) in case.q.iter().enumerate() {
            params.register(&format!("q{i}"), q.clone());
        }
        for (i, v) in case.v.iter().enumerate() {
            params.register(&format!("v{i}"), Tensor::vector(v.clone()));
        }
        for (i, t) in case.t.iter().enumerate() {
            params.register(&format!("t{i}"), Tensor::vector(t.clone()));
        }
        params.register("tau", Tensor::scalar(tau));
        let n_rows = rng.random_range(2..=4);
        params.register("logits", Tensor::randn(&[n_rows, 6], 1.0, &mut rng));
        let targets: Vec<usize> = (0..n_rows).map(|_| rng.random_range(0..6)).collect();

        let builders: [Box<dyn Fn(&mut Tape, &Params) -> Result<usize>>; 4] = [
            Box::new({
                let buffers = buffers.clone();
                move |tape, p| {
                    let q: Vec<_> = (0..b).map(|i| tape.param(p, i)).collect();
                    let t: Vec<_> = (0..b).map(|i| tape.param(p, 2 * b + i)).collect();
                    let tau = tape.param(p, 3 * b);
                    qcl_loss(tape, &q, &t, &buffers, tau)
                }
            }),
            Box::new({
                let buffers = buffers.clone();
                move |tape, p| {
                    let v: Vec<_> = (0..b).map(|i| tape.param(p, b + i)).collect();
                    let t: Vec<_> = (0..b).map(|i| tape.param(p, 2 * b + i)).collect();
                    let tau = tape.param(p, 3 * b);
                    cl_loss(tape, &v, &t, &buffers, tau)
                }
            }),
            Box::new({
                let targets = targets.clone();
                move |tape, p| {
                    let logits = tape.param(p, 3 * b + 1);
                    let mask = vec![true; targets.len()];
                    tape.cross_entropy(logits, &targets, &mask)
                }
            }),
            Box::new({
                let buffers = buffers.clone();
                let targets = targets.clone();
                move |tape, p| {
                    let q: Vec<_> = (0..b).map(|i| tape.param(p, i)).collect();
                    let v: Vec<_> = (0..b).map(|i| tape.param(p, b + i)).collect();
                    let t: Vec<_> = (0..b).map(|i| tape.param(p, 2 * b + i)).collect();
                    let tau = tape.param(p, 3 * b);
                    let l_qcl = qcl_loss(tape, &q, &t, &buffers, tau)?;
                    let l_cl = cl_loss(tape, &v, &t, &buffers, tau)?;
                    let logits = tape.param(p, 3 * b + 1);
                    let mask = vec![true; targets.len()];
                    let ce = tape.cross_entropy(logits, &targets, &mask)?;
                    let w = LossWeights::report_gen();
                    let lm = combine_lm(tape, ce, ce, ce, &w)?;
                    total_loss(tape, l_cl, l_qcl, lm, w.lambda)
                }
            }),
        ];
        for (slot, build) in builders.iter().enumerate() {
            let report = grad_check(build, &mut params, eps, tol)?;
            if report.max_rel_err > worst[slot].0 {
                worst[slot] = (
                    report.max_rel_err,
                    format!("case {case_ix} (B={b}, m={m}, d={d})"),
                );
            }
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, (err, at))| {
            Check::from(
                "gradients",
                format!("{name} x{cases}"),
                err < tol,
                format!("max rel err {err:.2e} (tol {tol:.0e}) at {at}"),
            )
        })
        .collect())
}

// ── loss suite ───────────────────────────────────────────────────────

fn loss_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    // Single pair, no buffer: the positive is the whole denominator.
    {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(2, 4, vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.1, 0.4])?);
        let t = tape.constant(Tensor::vector(vec![0.2, 0.1, -0.3, 0.5]));
        let tau = tape.constant(Tensor::scalar(0.07));
        let loss = qcl_loss(&mut tape, &[q], &[t], &NegativeBuffers::new(4), tau)?;
        let v = tape.value(loss).item();
        checks.push(Check::from("losses", "qcl B=1 N=0 is exactly 0", v == 0.0, format!("got {v}")));
    }

    // Identical features make every similarity equal; each direction then
    // scores -ln(1/2) = ln 2.
    {
        let mut tape = Tape::new();
        let f = Tensor::vector(vec![0.4, -0.2, 0.6]);
        let v: Vec<_> = (0..2).map(|_| tape.constant(f.clone())).collect();
        let t: Vec<_> = (0..2).map(|_| tape.constant(f.clone())).collect();
        let tau = tape.constant(Tensor::scalar(0.3));
        let loss = cl_loss(&mut tape, &v, &t, &NegativeBuffers::new(4), tau)?;
        let got = tape.value(loss).item();
        let want = (2.0 as S).ln();
        checks.push(Check::from(
            "losses",
            "all-equal-similarity B=2 gives ln 2",
            (got - want).abs() < 1.0e-6,
            format!("got {got}, want {want}"),
        ));
    }

    // Weighted LM combination, both presets, exact arithmetic.
    for (preset, w, want) in [
        ("report_gen", LossWeights::report_gen(), 9.0 * 1.0 + 1.0 * 2.0 + 3.0 * 3.0),
        ("visual", LossWeights::visual(), 1.0 * 1.0 + 3.0 * 2.0 + 9.0 * 3.0),
    ] {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        let m = tape.constant(Tensor::scalar(2.0));
        let f = tape.constant(Tensor::scalar(3.0));
        let lm = combine_lm(&mut tape, c, m, f, &w)?;
        let got = tape.value(lm).item();
        checks.push(Check::from(
            "losses",
            format!("lm weighting {preset} exact"),
            got == want as S,
            format!("got {got}, want {want}"),
        ));
    }
    {
        let mut tape = Tape::new();
        let cl = tape.constant(Tensor::scalar(0.5));
        let qcl = tape.constant(Tensor::scalar(0.25));
        let lm = tape.constant(Tensor::scalar(2.0));
        let total = total_loss(&mut tape, cl, qcl, lm, 1.0)?;
        let got = tape.value(total).item();
        checks.push(Check::from(
            "losses",
            "total with lambda=1 exact",
            got == 2.75,
            format!("got {got}"),
        ));
    }

    // Tape losses against the scalar-loop oracles.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0x51ab);
        let mut max_dq: S = 0.0;
        let mut max_dc: S = 0.0;
        for _ in 0..100 {
            let case = random_case(&mut rng);
            let (bt, bv, bq) = buffer_vecs(&case.buffers);
            let dq = (tape_qcl(&case)? - oracle_qcl(&case.q, &case.t, &bq, &bt, case.tau)).abs();
            let dc = (tape_cl(&case)? - oracle_cl(&case.v, &case.t, &bv, &bt, case.tau)).abs();
            max_dq = max_dq.max(dq);
            max_dc = max_dc.max(dc);
        }
        let tol: S = 1.0e-6;
        checks.push(Check::from(
            "losses",
            "qcl matches scalar-loop oracle x100",
            max_dq < tol,
            format!("max abs diff {max_dq:.2e}"),
        ));
        checks.push(Check::from(
            "losses",
            "cl matches scalar-loop oracle x100",
            max_dc < tol,
            format!("max abs diff {max_dc:.2e}"),
        ));
    }

    // Mutation fixture: the sign-flipped variant must disagree with the
    // tape implementation, proving the oracle comparison can fail.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xf1ab);
        let case = random_case(&mut rng);
        let (bt, _, bq) = buffer_vecs(&case.buffers);
        let diff = (tape_qcl(&case)? - mutant_qcl(&case.q, &case.t, &bq, &bt, case.tau)).abs();
        checks.push(Check::from(
            "losses",
            "sign-flip mutant is caught",
            diff > 1.0e-3,
            format!("tape vs mutant diff {diff:.2e}"),
        ));
    }

    Ok(checks)
}

// ── buffer suite ─────────────────────────────────────────────────────

fn buffer_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let tagged = |v: S| (Tensor::vector(vec![v]), Tensor::vector(vec![v + 100.0]), Tensor::matrix(1, 1, vec![v + 200.0]).unwrap());

    // k pushes of batch size 3 into capacity 5: exactly the last 5 entries
    // survive, oldest first, across all three stores.
    {
        let mut buffers = NegativeBuffers::new(5);
        let mut next = 0.0;
        for _ in 0..4 {
            let batch: Vec<_> = (0..3)
                .map(|_| {
                    let e = tagged(next);
                    next += 1.0;
                    e
                })
                .collect();
            let t: Vec<_> = batch.iter().map(|e| e.0.clone()).collect();
            let v: Vec<_> = batch.iter().map(|e| e.1.clone()).collect();
            let q: Vec<_> = batch.iter().map(|e| e.2.clone()).collect();
            buffers.push(&t, &v, &q);
        }
        let got_t: Vec<S> = buffers.text().map(|t| t.data()[0]).collect();
        let got_v: Vec<S> = buffers.visual().map(|t| t.data()[0] - 100.0).collect();
        let got_q: Vec<S> = buffers.quasi().map(|t| t.data()[0] - 200.0).collect();
        let want: Vec<S> = vec![7.0, 8.0, 9.0, 10.0, 11.0];
        let pass = got_t == want && got_v == want && got_q == want;
        checks.push(Check::from(
            "buffers",
            "FIFO keeps last min(kB, N) oldest-first",
            pass,
            format!("text store holds {got_t:?}, want {want:?}"),
        ));
    }

    // A parameter that produced a buffered entry gets no gradient from a
    // later step's loss: buffered features are detached copies.
    {
        let mut params = Params::new();
        let pid = params.register("old_t", Tensor::vector(vec![0.5, -0.3, 0.2, 0.9]));
        let mut buffers = NegativeBuffers::new(4);
        buffers.push(
            &[params.value(pid).clone()],
            &[Tensor::vector(vec![1.0, 0.0, 0.0, 0.0])],
            &[Tensor::matrix(2, 4, vec![0.1; 8])?],
        );
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0.3, 0.3, -0.1, 0.8]));
        let t = tape.constant(Tensor::vector(vec![0.2, -0.6, 0.4, 0.1]));
        let tau = tape.constant(Tensor::scalar(0.1));
        let loss = cl_loss(&mut tape, &[v], &[t], &buffers, tau)?;
        params.zero_grads();
        tape.backward(loss, &mut params);
        let gnorm: S = params.grad(pid).data().iter().map(|g| g * g).sum();
        checks.push(Check::from(
            "buffers",
            "buffered entries receive zero gradient",
            gnorm == 0.0,
            format!("grad norm² {gnorm}"),
        ));
    }

    Ok(checks)
}

// ── metric suite ─────────────────────────────────────────────────────

fn oracle_bleu(cand: &[&str], refr: &[&str], max_n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if cand.len() < n {
            return 0.0;
        }
        let total = cand.len() + 1 - n;
        let mut clipped = 0usize;
        // Quadratic scan; each candidate n-gram may match each reference
        // position at most once.
        let mut used = vec![false; refr.len()];
        for i in 0..total {
            for j in 0..refr.len().saturating_sub(n - 1) {
                if !used[j] && cand[i..i + n] == refr[j..j + n] {
                    used[j] = true;
                    clipped += 1;
                    break;
                }
            }
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln() / max_n as f64;
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * log_sum.exp()
}

fn oracle_lcs(a: &[&str], b: &[&str]) -> usize {
    // Plain recursion, exponential; fixture sequences stay short.
    if a.is_empty() || b.is_empty() {
        0
    } else if a[a.len() - 1] == b[b.len() - 1] {
        1 + oracle_lcs(&a[..a.len() - 1], &b[..b.len() - 1])
    } else {
        oracle_lcs(&a[..a.len() - 1], b).max(oracle_lcs(a, &b[..b.len() - 1]))
    }
}

fn oracle_rouge(cand: &[&str], refr: &[&str], beta: f64) -> f64 {
    let l = oracle_lcs(cand, refr) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / refr.len() as f64;
    (1.0 + beta * beta) * p * r / (r + beta * beta * p)
}

fn fixture_pairs() -> Vec<(Vec<&'static str>, Vec<&'static str>)> {
    let words = ["the", "gland", "shows", "a", "nodule", "smooth", "echo", "region", "no", "."];
    let mut rng = ChaCha8Rng::seed_from_u64(0xb1ee);
    (0..20)
        .map(|_| {
            let mk = |rng: &mut ChaCha8Rng| {
                let len = rng.random_range(2..12);
                (0..len).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>()
            };
            (mk(&mut rng), mk(&mut rng))
        })
        .collect()
}

fn metric_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let pairs = fixture_pairs();

    let mut max_db = 0.0f64;
    let mut max_dr = 0.0f64;
    for (cand, refr) in &pairs {
        for n in 1..=4 {
            let db = (bleu(cand, refr, n)? - oracle_bleu(cand, refr, n)).abs();
            max_db = max_db.max(db);
        }
        let dr = (rouge_l_beta(cand, refr, 1.2)? - oracle_rouge(cand, refr, 1.2)).abs();
        max_dr = max_dr.max(dr);
    }
    checks.push(Check::from(
        "metrics",
        "BLEU matches counting oracle on 20 pairs",
        max_db < 1.0e-9,
        format!("max abs diff {max_db:.2e}"),
    ));
    checks.push(Check::from(
        "metrics",
        "ROUGE-L matches recursive LCS oracle on 20 pairs",
        max_dr < 1.0e-9,
        format!("max abs diff {max_dr:.2e}"),
    ));

    let sample = &pairs[0].0;
    let b4 = bleu(sample, sample, 4)?;
    let rl = rouge_l_beta(sample, sample, 1.2)?;
    checks.push(Check::from(
        "metrics",
        "self-comparison scores 1.0",
        (b4 - 1.0).abs() < 1.0e-12 && (rl - 1.0).abs() < 1.0e-12,
        format!("BLEU-4 {b4}, ROUGE-L {rl}"),
    ));

    // Random-feature retrieval should sit at the 1/n permutation baseline.
    {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(0xd0e5);
        let scores: Vec<S> = (0..n * n).map(|_| rng.random()).collect();
        let acc = retrieval_accuracy(n, 1, |i, j| scores[i * n + j])?;
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        checks.push(Check::from(
            "metrics",
            "random retrieval near 1/n",
            (acc - p).abs() <= 3.0 * sigma,
            format!("top-1 {acc:.4}, baseline {p:.4} ± {:.4}", 3.0 * sigma),
        ));
    }

    Ok(checks)
}

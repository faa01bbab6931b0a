//! Training objectives: the max-over-tokens similarity `s_q`, the two
//! buffered symmetric InfoNCE losses (QCL over quasi-textual tokens, CL over
//! global features), the granularity language-modeling losses and their
//! weighted combinations, and the three FIFO negative-sample buffers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Ix, Tape, Tensor, S};

/// Clamp range for the learnable temperatures.
pub const TAU_MIN: S = 0.01;
pub const TAU_MAX: S = 1.0;
/// CLIP-style initial temperature.
pub const TAU_INIT: S = 0.07;

/// Loss weights. The two paper presets are `(λ_c, λ_m, λ_f) = (9, 1, 3)`
/// for report generation and `(1, 3, 9)` for visual downstream tasks, with
/// `λ = 1` in both.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: S,
    pub lambda_c: S,
    pub lambda_m: S,
    pub lambda_f: S,
}

impl LossWeights {
    pub fn report_gen() -> Self {
        LossWeights { lambda: 1.0, lambda_c: 9.0, lambda_m: 1.0, lambda_f: 3.0 }
    }

    pub fn visual() -> Self {
        LossWeights { lambda: 1.0, lambda_c: 1.0, lambda_m: 3.0, lambda_f: 9.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.lambda_c, self.lambda_m, self.lambda_f];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Three FIFO stores of detached recent-batch features used as extra
/// InfoNCE negatives: global text `T`, global visual `V`, and quasi-textual
/// blocks `Q`. Entries are plain tensors and never receive gradient.
#[derive(Debug, Clone, Default)]
pub struct NegativeBuffers {
    pub capacity: usize,
    buf_t: VecDeque<Tensor>,
    buf_v: VecDeque<Tensor>,
    buf_q: VecDeque<Tensor>,
}

impl NegativeBuffers {
    pub fn new(capacity: usize) -> Self {
        NegativeBuffers { capacity, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.buf_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf_t.is_empty()
    }

    pub fn text(&self) -> impl Iterator<Item = &Tensor> {
        self.buf_t.iter()
    }

    pub fn visual(&self) -> impl Iterator<Item = &Tensor> {
        self.buf_v.iter()
    }

    pub fn quasi(&self) -> impl Iterator<Item = &Tensor> {
        self.buf_q.iter()
    }

    /// Appends a batch of detached features, evicting oldest-first past the
    /// capacity. Call after the current batch's losses are computed.
    pub fn push(&mut self, t_batch: &[Tensor], v_batch: &[Tensor], q_batch: &[Tensor]) {
        assert!(t_batch.len() == v_batch.len() && v_batch.len() == q_batch.len());
        for ((t, v), q) in t_batch.iter().zip(v_batch).zip(q_batch) {
            self.buf_t.push_back(t.clone());
            self.buf_v.push_back(v.clone());
            self.buf_q.push_back(q.clone());
            while self.buf_t.len() > self.capacity {
                self.buf_t.pop_front();
                self.buf_v.pop_front();
                self.buf_q.pop_front();
            }
        }
    }
}

/// `s_q(Q, T)`: the maximum cosine similarity between any row of `Q`
/// (`[m, d]`) and the global text feature `T` (`[d]`).
pub fn sq_similarity(tape: &mut Tape, q: Ix, t: Ix) -> Result<Ix> {
    let m = tape.value(q).rows();
    if tape.value(q).cols() != tape.value(t).numel() {
        return Err(Error::Shape(format!(
            "sq_similarity: Q {:?} vs T {:?}",
            tape.value(q).shape(),
            tape.value(t).shape()
        )));
    }
    let mut sims = Vec::with_capacity(m);
    for l in 0..m {
        let row = tape.row(q, l)?;
        sims.push(tape.cosine_sim(row, t)?);
    }
    let stacked = tape.stack_scalars(&sims)?;
    Ok(tape.reduce_max(stacked))
}

/// One direction of symmetric InfoNCE: `-log softmax(sims/τ)[pos]` where
/// `sims` includes the positive (at `pos`) and all negatives.
fn info_nce_term(tape: &mut Tape, sims: &[Ix], pos: usize, tau: Ix) -> Result<Ix> {
    let stacked = tape.stack_scalars(sims)?;
    let scaled = tape.div_scalar_node(stacked, tau)?;
    let denom = tape.log_sum_exp(scaled);
    let pos_scaled = tape.div_scalar_node(sims[pos], tau)?;
    tape.sub(denom, pos_scaled)
}

/// Symmetric buffered InfoNCE over a caller-supplied pairwise similarity.
/// `sim(tape, row_feature, text_feature)` must produce a scalar node.
fn buffered_info_nce(
    tape: &mut Tape,
    feats: &[Ix],
    texts: &[Ix],
    buf_feats: &[Ix],
    buf_texts: &[Ix],
    tau: Ix,
    mut sim: impl FnMut(&mut Tape, Ix, Ix) -> Result<Ix>,
) -> Result<Ix> {
    let b = feats.len();
    if b == 0 || texts.len() != b {
        return Err(Error::Invalid(format!(
            "contrastive batch sizes {} and {} (must be equal and ≥ 1)",
            b,
            texts.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        // Feature i against every text candidate (in-batch then buffered).
        let mut sims = Vec::with_capacity(b + buf_texts.len());
        for &t in texts.iter().chain(buf_texts) {
            sims.push(sim(tape, feats[i], t)?);
        }
        terms.push(info_nce_term(tape, &sims, i, tau)?);
        // Text i against every feature candidate.
        let mut sims = Vec::with_capacity(b + buf_feats.len());
        for &f in feats.iter().chain(buf_feats) {
            sims.push(sim(tape, f, texts[i])?);
        }
        terms.push(info_nce_term(tape, &sims, i, tau)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / (2.0 * b as S)))
}

/// QCL: symmetric InfoNCE between quasi-textual blocks and global text
/// features under `s_q`, with buffered negatives. The positive pair appears
/// in its own denominator.
pub fn qcl_loss(
    tape: &mut Tape,
    q_batch: &[Ix],
    t_batch: &[Ix],
    buffers: &NegativeBuffers,
    tau: Ix,
) -> Result<Ix> {
    let buf_q: Vec<Ix> = buffers.quasi().map(|t| tape.constant(t.clone())).collect();
    let buf_t: Vec<Ix> = buffers.text().map(|t| tape.constant(t.clone())).collect();
    buffered_info_nce(tape, q_batch, t_batch, &buf_q, &buf_t, tau, sq_similarity)
}

/// CL: identical structure with plain cosine similarity over global
/// visual/text features.
pub fn cl_loss(
    tape: &mut Tape,
    v_batch: &[Ix],
    t_batch: &[Ix],
    buffers: &NegativeBuffers,
    tau: Ix,
) -> Result<Ix> {
    let buf_v: Vec<Ix> = buffers.visual().map(|t| tape.constant(t.clone())).collect();
    let buf_t: Vec<Ix> = buffers.text().map(|t| tape.constant(t.clone())).collect();
    buffered_info_nce(tape, v_batch, t_batch, &buf_v, &buf_t, tau, |tp, a, b| {
        tp.cosine_sim(a, b)
    })
}

/// Teacher-forced language-modeling loss: mean over unmasked answer
/// positions of `-log softmax(logits)[target]`.
pub fn lm_loss(tape: &mut Tape, logits: Ix, targets: &[usize], mask: &[bool]) -> Result<Ix> {
    tape.cross_entropy(logits, targets, mask)
}

/// `λ_c·l_clm + λ_m·l_mlm + λ_f·l_flm`.
pub fn combine_lm(tape: &mut Tape, l_clm: Ix, l_mlm: Ix, l_flm: Ix, w: &LossWeights) -> Result<Ix> {
    let a = tape.scale(l_clm, w.lambda_c);
    let b = tape.scale(l_mlm, w.lambda_m);
    let c = tape.scale(l_flm, w.lambda_f);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// `L = λ·L_cl + L_qcl + L_lm`.
pub fn total_loss(tape: &mut Tape, l_cl: Ix, l_qcl: Ix, l_lm: Ix, lambda: S) -> Result<Ix> {
    let weighted = tape.scale(l_cl, lambda);
    let partial = tape.add(weighted, l_qcl)?;
    tape.add(partial, l_lm)
}

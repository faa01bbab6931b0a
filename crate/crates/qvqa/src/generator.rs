//! Autoregressive text generator conditioned on quasi-textual features via
//! prefix embeddings: the concatenated query outputs of the two images are
//! injected as leading context rows with their own learned positions, the
//! question follows as a prompt, and answers are scored or greedily decoded
//! under a causal mask over the textual region. Prefix rows are mutually
//! visible and never attend to text.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, LayerNorm, Linear, INIT_STD};
use crate::tensor::{Ix, ParamId, Params, Tape, Tensor, S};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Prefix row count, `2m` for the two-image concatenation.
    pub prefix_len: usize,
    /// Maximum textual positions (question + generated answer).
    pub max_text_len: usize,
    pub max_gen_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            prefix_len: 16,
            max_text_len: 96,
            max_gen_len: 72,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    tok_emb: ParamId,
    text_pos: ParamId,
    /// Positions for the prefix rows, distinct from text positions, so the
    /// two images' queries keep a deterministic ordering.
    prefix_pos: ParamId,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    lm_head: Linear,
    eos_id: usize,
}

impl Generator {
    pub fn new<R: Rng>(
        cfg: GeneratorConfig,
        eos_id: usize,
        params: &mut Params,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        let tok_emb = params.register(
            "gen.tok_emb",
            Tensor::randn(&[cfg.vocab_size, cfg.d_model], INIT_STD, rng),
        );
        let text_pos = params.register(
            "gen.text_pos",
            Tensor::randn(&[cfg.max_text_len, cfg.d_model], INIT_STD, rng),
        );
        let prefix_pos = params.register(
            "gen.prefix_pos",
            Tensor::randn(&[cfg.prefix_len, cfg.d_model], INIT_STD, rng),
        );
        let blocks = (0..cfg.n_layers)
            .map(|i| EncoderBlock::new(params, &format!("gen.block{i}"), cfg.d_model, cfg.n_heads, rng))
            .collect();
        let final_ln = LayerNorm::new(params, "gen.final_ln", cfg.d_model);
        let lm_head = Linear::new(params, "gen.lm_head", cfg.d_model, cfg.vocab_size, rng);
        Ok(Generator { cfg, tok_emb, text_pos, prefix_pos, blocks, final_ln, lm_head, eos_id })
    }

    /// Attention mask: prefix rows see only the prefix; text position `i`
    /// sees the prefix plus text positions `≤ i`.
    fn causal_mask(&self, text_len: usize) -> Vec<bool> {
        let p = self.cfg.prefix_len;
        let n = p + text_len;
        let mut mask = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                let allowed = if q < p { k < p } else { k < p || k <= q };
                mask[q * n + k] = allowed;
            }
        }
        mask
    }

    /// Hidden states over `[prefix ++ text]` under the prefix-causal mask.
    fn hidden(&self, tape: &mut Tape, params: &Params, q_cat: Ix, text: &[usize]) -> Result<Ix> {
        let qv = tape.value(q_cat);
        if qv.shape() != [self.cfg.prefix_len, self.cfg.d_model] {
            return Err(Error::Shape(format!(
                "prefix shape {:?}, expected [{}, {}]",
                qv.shape(),
                self.cfg.prefix_len,
                self.cfg.d_model
            )));
        }
        if text.len() > self.cfg.max_text_len {
            return Err(Error::Invalid(format!(
                "text length {} exceeds context window {} (prefix {})",
                text.len(),
                self.cfg.max_text_len,
                self.cfg.prefix_len
            )));
        }
        let ppos = tape.param(params, self.prefix_pos);
        let prefix = tape.add(q_cat, ppos)?;
        let table = tape.param(params, self.tok_emb);
        let emb = tape.embedding(table, text)?;
        let tpos_full = tape.param(params, self.text_pos);
        let tpos = tape.slice_rows(tpos_full, 0, text.len())?;
        let temb = tape.add(emb, tpos)?;
        let mut x = tape.concat_rows(&[prefix, temb])?;
        let mask = self.causal_mask(text.len());
        for block in &self.blocks {
            x = block.forward(tape, params, x, Some(&mask))?;
        }
        self.final_ln.forward(tape, params, x)
    }

    /// Teacher-forced scoring: next-token logits at the answer positions
    /// only, shape `[answer_len, vocab]`. `answer` must be non-empty.
    pub fn condition_and_score(
        &self,
        tape: &mut Tape,
        params: &Params,
        q_cat: Ix,
        question: &[usize],
        answer: &[usize],
    ) -> Result<Ix> {
        if question.is_empty() || answer.is_empty() {
            return Err(Error::Invalid("question and answer must be non-empty".into()));
        }
        // The final answer token is a target only; it is never fed back in.
        let mut text = question.to_vec();
        text.extend_from_slice(&answer[..answer.len() - 1]);
        let h = self.hidden(tape, params, q_cat, &text)?;
        // Position predicting answer[j] is the row holding the previous token.
        let start = self.cfg.prefix_len + question.len() - 1;
        let rows = tape.slice_rows(h, start, start + answer.len())?;
        self.lm_head.forward(tape, params, rows)
    }

    /// Greedy decoding until `[EOS]` or `max_gen_len`; deterministic for
    /// fixed weights and inputs. `q_cat` is detached conditioning data.
    pub fn generate(
        &self,
        params: &Params,
        q_cat: &Tensor,
        question: &[usize],
    ) -> Result<Vec<usize>> {
        let mut text = question.to_vec();
        let mut out = Vec::new();
        while out.len() < self.cfg.max_gen_len && text.len() < self.cfg.max_text_len {
            let mut tape = Tape::new();
            let qc = tape.constant(q_cat.clone());
            let h = self.hidden(&mut tape, params, qc, &text)?;
            let last = self.cfg.prefix_len + text.len() - 1;
            let row = tape.slice_rows(h, last, last + 1)?;
            let logits = self.lm_head.forward(&mut tape, params, row)?;
            let next = argmax(tape.value(logits).data());
            if next == self.eos_id {
                break;
            }
            out.push(next);
            text.push(next);
        }
        Ok(out)
    }
}

fn argmax(xs: &[S]) -> usize {
    let mut best = 0;
    let mut bv = S::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

//! Shared transformer building blocks: linear layers, multi-head attention,
//! feed-forward, and pre-LN residual blocks. All weights are registered in a
//! [`Params`] registry at construction; forward passes build tape nodes.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Ix, ParamId, Params, Tape, Tensor, S};

pub const INIT_STD: S = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.register(&format!("{name}.w"), Tensor::randn(&[d_in, d_out], INIT_STD, rng));
        let b = params.register(&format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Ix) -> Result<Ix> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let y = tape.matmul(x, w)?;
        if tape.value(y).rank() == 1 {
            tape.add(y, b)
        } else {
            tape.add_row(y, b)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, d: usize) -> Self {
        let gain = params.register(
            &format!("{name}.gain"),
            Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        );
        let bias = params.register(&format!("{name}.bias"), Tensor::zeros(&[d]));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Ix) -> Result<Ix> {
        let g = tape.param(params, self.gain);
        let b = tape.param(params, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(params, &format!("{name}.wq"), d_model, d_model, rng),
            wk: Linear::new(params, &format!("{name}.wk"), d_model, d_model, rng),
            wv: Linear::new(params, &format!("{name}.wv"), d_model, d_model, rng),
            wo: Linear::new(params, &format!("{name}.wo"), d_model, d_model, rng),
            n_heads,
            d_model,
        }
    }

    /// Attention of `x_q` over `x_kv` (`x_q == x_kv` for self-attention).
    /// `mask`, when present, is row-major `[L_q × L_kv]` with `true` for
    /// allowed query→key pairs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x_q: Ix,
        x_kv: Ix,
        mask: Option<&[bool]>,
    ) -> Result<Ix> {
        let dh = self.d_model / self.n_heads;
        let q = self.wq.forward(tape, params, x_q)?;
        let k = self.wk.forward(tape, params, x_kv)?;
        let v = self.wv.forward(tape, params, x_kv)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as S).sqrt());
            let scores = match mask {
                Some(m) => tape.add_mask(scores, m)?,
                None => scores,
            };
            let probs = tape.softmax_rows(scores);
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        self.wo.forward(tape, params, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(params: &mut Params, name: &str, d_model: usize, rng: &mut R) -> Self {
        FeedForward {
            fc1: Linear::new(params, &format!("{name}.fc1"), d_model, 4 * d_model, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), 4 * d_model, d_model, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Ix) -> Result<Ix> {
        let h = self.fc1.forward(tape, params, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, params, h)
    }
}

/// Pre-LN self-attention block: `x + attn(ln1(x))`, `x + ffn(ln2(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), d_model, n_heads, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), d_model),
            ffn: FeedForward::new(params, &format!("{name}.ffn"), d_model, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Ix,
        mask: Option<&[bool]>,
    ) -> Result<Ix> {
        let n = self.ln1.forward(tape, params, x)?;
        let a = self.attn.forward(tape, params, n, n, mask)?;
        let x = tape.add(x, a)?;
        let n = self.ln2.forward(tape, params, x)?;
        let f = self.ffn.forward(tape, params, n)?;
        tape.add(x, f)
    }
}

/// Decoder-style block: self-attention, cross-attention over external
/// keys/values, then feed-forward, each with pre-LN residuals.
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttnBlock {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        CrossAttnBlock {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), d_model),
            self_attn: MultiHeadAttention::new(params, &format!("{name}.self"), d_model, n_heads, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), d_model),
            cross_attn: MultiHeadAttention::new(params, &format!("{name}.cross"), d_model, n_heads, rng),
            ln3: LayerNorm::new(params, &format!("{name}.ln3"), d_model),
            ffn: FeedForward::new(params, &format!("{name}.ffn"), d_model, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Ix, kv: Ix) -> Result<Ix> {
        let n = self.ln1.forward(tape, params, x)?;
        let a = self.self_attn.forward(tape, params, n, n, None)?;
        let x = tape.add(x, a)?;
        let n = self.ln2.forward(tape, params, x)?;
        let c = self.cross_attn.forward(tape, params, n, kv, None)?;
        let x = tape.add(x, c)?;
        let n = self.ln3.forward(tape, params, x)?;
        let f = self.ffn.forward(tape, params, n)?;
        tape.add(x, f)
    }
}

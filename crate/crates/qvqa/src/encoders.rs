//! Toy-scale visual and text encoders producing the four feature families:
//! global visual `V`, patch features `v`, global textual `T`, token
//! features `t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, LayerNorm, Linear, INIT_STD};
use crate::tensor::{Ix, ParamId, Params, Tape, Tensor, S};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    /// Pixels per side; images are square grayscale.
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig { image_size: 64, patch_size: 8, d_model: 64, n_layers: 2, n_heads: 4 }
    }
}

impl VisualEncoderConfig {
    pub fn patch_count(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_count() < 4 {
            return Err(Error::Config(format!("patch count {} < 4", self.patch_count())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { vocab_size: 256, max_len: 96, d_model: 64, n_layers: 2, n_heads: 4 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must cover the reserved specials".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Splits a square grayscale image into flattened patches in raster order.
/// Returns `[P, patch_size²]`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    if image.rank() != 2 || image.shape()[0] != image.shape()[1] {
        return Err(Error::Shape(format!("patchify expects a square image, got {:?}", image.shape())));
    }
    let side = image.shape()[0];
    if side % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image side {side} not divisible by patch size {patch_size}"
        )));
    }
    let per_side = side / patch_size;
    let p = per_side * per_side;
    let mut data = Vec::with_capacity(p * patch_size * patch_size);
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let x0 = px * patch_size;
                data.extend_from_slice(&image.data()[y * side + x0..y * side + x0 + patch_size]);
            }
        }
    }
    Tensor::matrix(p, patch_size * patch_size, data)
}

/// ViT-style patch encoder. Global feature `V` is the mean over the patch
/// outputs (pooling rule is a documented choice; the row features carry the
/// positional information).
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderConfig,
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
}

impl VisualEncoder {
    pub fn new<R: Rng>(cfg: VisualEncoderConfig, params: &mut Params, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_count();
        let patch_dim = cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::new(params, "vis.patch_embed", patch_dim, cfg.d_model, rng);
        let pos = params.register("vis.pos", Tensor::randn(&[p, cfg.d_model], INIT_STD, rng));
        let blocks = (0..cfg.n_layers)
            .map(|i| EncoderBlock::new(params, &format!("vis.block{i}"), cfg.d_model, cfg.n_heads, rng))
            .collect();
        let final_ln = LayerNorm::new(params, "vis.final_ln", cfg.d_model);
        Ok(VisualEncoder { cfg, patch_embed, pos, blocks, final_ln })
    }

    /// `(V, v)`: global `[d_model]` and patch features `[P, d_model]`.
    pub fn encode(&self, tape: &mut Tape, params: &Params, image: &Tensor) -> Result<(Ix, Ix)> {
        self.encode_with_pos_scale(tape, params, image, 1.0)
    }

    /// Diagnostic entry point: `pos_scale = 0` removes position information,
    /// making the encoder permutation-equivariant in the patches.
    pub fn encode_with_pos_scale(
        &self,
        tape: &mut Tape,
        params: &Params,
        image: &Tensor,
        pos_scale: S,
    ) -> Result<(Ix, Ix)> {
        if image.shape() != [self.cfg.image_size, self.cfg.image_size] {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match config {}×{}",
                image.shape(),
                self.cfg.image_size,
                self.cfg.image_size
            )));
        }
        let patches = patchify(image, self.cfg.patch_size)?;
        let patches = tape.constant(patches);
        let mut x = self.patch_embed.forward(tape, params, patches)?;
        let pos = tape.param(params, self.pos);
        let pos = tape.scale(pos, pos_scale);
        x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, params, x, None)?;
        }
        let v = self.final_ln.forward(tape, params, x)?;
        let global = tape.mean_axis0(v)?;
        Ok((global, v))
    }
}

/// Bidirectional transformer over token embeddings. Global feature `T` is
/// the output row at the leading `[CLS]` position.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    tok_emb: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn new<R: Rng>(cfg: TextEncoderConfig, params: &mut Params, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let tok_emb = params.register(
            "txt.tok_emb",
            Tensor::randn(&[cfg.vocab_size, cfg.d_model], INIT_STD, rng),
        );
        let pos = params.register("txt.pos", Tensor::randn(&[cfg.max_len, cfg.d_model], INIT_STD, rng));
        let blocks = (0..cfg.n_layers)
            .map(|i| EncoderBlock::new(params, &format!("txt.block{i}"), cfg.d_model, cfg.n_heads, rng))
            .collect();
        let final_ln = LayerNorm::new(params, "txt.final_ln", cfg.d_model);
        Ok(TextEncoder { cfg, tok_emb, pos, blocks, final_ln })
    }

    /// `(T, t)`: global `[d_model]` and token features `[L, d_model]`.
    /// `key_mask`, when present, marks which positions may be attended to
    /// (padding exclusion); queries are never masked.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Params,
        tokens: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Result<(Ix, Ix)> {
        let n = tokens.len();
        if n == 0 || n > self.cfg.max_len {
            return Err(Error::Invalid(format!(
                "token sequence length {n} outside 1..={}",
                self.cfg.max_len
            )));
        }
        if let Some(km) = key_mask {
            if km.len() != n {
                return Err(Error::Shape(format!("key mask length {} vs {} tokens", km.len(), n)));
            }
        }
        let table = tape.param(params, self.tok_emb);
        let mut x = tape.embedding(table, tokens)?;
        let pos_full = tape.param(params, self.pos);
        let pos = tape.slice_rows(pos_full, 0, n)?;
        x = tape.add(x, pos)?;
        let attn_mask: Option<Vec<bool>> = key_mask.map(|km| {
            let mut m = Vec::with_capacity(n * n);
            for _q in 0..n {
                m.extend_from_slice(km);
            }
            m
        });
        for block in &self.blocks {
            x = block.forward(tape, params, x, attn_mask.as_deref())?;
        }
        let t = self.final_ln.forward(tape, params, x)?;
        let global = tape.row(t, 0)?;
        Ok((global, t))
    }
}

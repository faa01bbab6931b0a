//! Quasi-textual Feature Transformer: `m` trainable query tokens attend to
//! patch features through decoder-style blocks (bidirectional self-attention
//! among the queries, cross-attention over the patches, feed-forward),
//! compressing `P` patch features into `m` quasi-textual tokens. Also the
//! two-image fusion rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CrossAttnBlock, LayerNorm, INIT_STD};
use crate::tensor::{Ix, ParamId, Params, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QftConfig {
    /// Query count; the bottleneck width. Must stay below the paired
    /// encoder's patch count.
    pub m: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for QftConfig {
    fn default() -> Self {
        QftConfig { m: 8, d_model: 64, n_layers: 3, n_heads: 4 }
    }
}

impl QftConfig {
    pub fn validate(&self, patch_count: usize) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("query count m={} must be ≥ 2", self.m)));
        }
        if self.m >= patch_count {
            return Err(Error::Config(format!(
                "bottleneck requires m ({}) < patch count ({patch_count})",
                self.m
            )));
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

#[derive(Debug, Clone)]
pub struct Qft {
    pub cfg: QftConfig,
    /// The shared trainable query bank, `[m, d_model]`.
    pub queries: ParamId,
    blocks: Vec<CrossAttnBlock>,
    final_ln: LayerNorm,
}

impl Qft {
    pub fn new<R: Rng>(
        cfg: QftConfig,
        patch_count: usize,
        params: &mut Params,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(patch_count)?;
        let queries =
            params.register("qft.queries", Tensor::randn(&[cfg.m, cfg.d_model], INIT_STD, rng));
        let blocks = (0..cfg.n_layers)
            .map(|i| CrossAttnBlock::new(params, &format!("qft.block{i}"), cfg.d_model, cfg.n_heads, rng))
            .collect();
        let final_ln = LayerNorm::new(params, "qft.final_ln", cfg.d_model);
        Ok(Qft { cfg, queries, blocks, final_ln })
    }

    /// Runs the query bank against patch features `v` (`[P, d_model]`),
    /// producing `Q` with exactly `m` rows regardless of `P`.
    pub fn forward(&self, tape: &mut Tape, params: &Params, patch_features: Ix) -> Result<Ix> {
        if tape.value(patch_features).cols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "patch feature width {:?} vs d_model {}",
                tape.value(patch_features).shape(),
                self.cfg.d_model
            )));
        }
        let mut x = tape.param(params, self.queries);
        for block in &self.blocks {
            x = block.forward(tape, params, x, patch_features)?;
        }
        self.final_ln.forward(tape, params, x)
    }
}

/// Two-image fusion: elementwise average of the quasi-textual blocks for
/// QCL, row concatenation for generation, and the average global visual
/// feature for CL.
pub fn fuse_pair(
    tape: &mut Tape,
    q_a: Ix,
    q_b: Ix,
    v_a: Ix,
    v_b: Ix,
) -> Result<(Ix, Ix, Ix)> {
    let q_sum = tape.add(q_a, q_b)?;
    let q_avg = tape.scale(q_sum, 0.5);
    let q_cat = tape.concat_rows(&[q_a, q_b])?;
    let v_sum = tape.add(v_a, v_b)?;
    let v_avg = tape.scale(v_sum, 0.5);
    Ok((q_avg, q_cat, v_avg))
}

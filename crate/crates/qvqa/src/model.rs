//! Full pre-training model: shared visual encoder, text encoder, QFT, text
//! generator, and the two learnable temperatures, all registered in one
//! parameter registry.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{TextEncoder, TextEncoderConfig, VisualEncoder, VisualEncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{TAU_INIT, TAU_MAX, TAU_MIN};
use crate::qft::{fuse_pair, Qft, QftConfig};
use crate::tensor::{load_checkpoint, save_checkpoint, Ix, ParamId, Params, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub visual: VisualEncoderConfig,
    pub text: TextEncoderConfig,
    pub qft: QftConfig,
    pub gen_layers: usize,
    pub max_gen_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual: VisualEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            qft: QftConfig::default(),
            gen_layers: 2,
            max_gen_len: 72,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.text.validate()?;
        self.qft.validate(self.visual.patch_count())?;
        let d = self.visual.d_model;
        if self.text.d_model != d || self.qft.d_model != d {
            return Err(Error::Config(format!(
                "d_model mismatch: visual {d}, text {}, qft {}",
                self.text.d_model, self.qft.d_model
            )));
        }
        Ok(())
    }

    fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: self.text.vocab_size,
            d_model: self.visual.d_model,
            n_layers: self.gen_layers,
            n_heads: self.visual.n_heads,
            prefix_len: 2 * self.qft.m,
            max_text_len: self.text.max_len,
            max_gen_len: self.max_gen_len,
        }
    }
}

/// Per-image feature bundle: global visual `V`, patch features `v`, and the
/// quasi-textual tokens `Q`.
#[derive(Debug, Clone, Copy)]
pub struct ImageFeatures {
    pub global: Ix,
    pub patches: Ix,
    pub quasi: Ix,
}

/// Per-sample features for the two-image / one-report unit: the fused
/// visual and quasi-textual features plus the text encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct PairFeatures {
    pub a: ImageFeatures,
    pub b: ImageFeatures,
    /// `(V_a + V_b) / 2`, the CL feature.
    pub v_avg: Ix,
    /// `(Q_a + Q_b) / 2`, the QCL feature.
    pub q_avg: Ix,
    /// `[Q_a; Q_b]`, the generator prefix.
    pub q_cat: Ix,
    /// Global text feature `T` ([CLS] row).
    pub t_global: Ix,
    /// Token features `t`.
    pub t_tokens: Ix,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub qft: Qft,
    pub generator: Generator,
    pub tau_q: ParamId,
    pub tau_c: ParamId,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, eos_id: usize) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = VisualEncoder::new(cfg.visual.clone(), &mut params, &mut rng)?;
        let text = TextEncoder::new(cfg.text.clone(), &mut params, &mut rng)?;
        let qft = Qft::new(cfg.qft.clone(), cfg.visual.patch_count(), &mut params, &mut rng)?;
        let generator = Generator::new(cfg.generator_config(), eos_id, &mut params, &mut rng)?;
        let tau_q = params.register("loss.tau_q", Tensor::scalar(TAU_INIT));
        let tau_c = params.register("loss.tau_c", Tensor::scalar(TAU_INIT));
        Ok(Model { cfg, params, visual, text, qft, generator, tau_q, tau_c })
    }

    /// Clamped temperature nodes for the current tape.
    pub fn tau_q_node(&self, tape: &mut Tape) -> Ix {
        let raw = tape.param(&self.params, self.tau_q);
        tape.clamp(raw, TAU_MIN, TAU_MAX)
    }

    pub fn tau_c_node(&self, tape: &mut Tape) -> Ix {
        let raw = tape.param(&self.params, self.tau_c);
        tape.clamp(raw, TAU_MIN, TAU_MAX)
    }

    /// Projects the raw temperatures back into the clamp range. The clamp
    /// node has zero gradient outside the range, so without projection a
    /// temperature that overshoots the floor could never recover.
    pub fn project_taus(&mut self) {
        for id in [self.tau_q, self.tau_c] {
            let v = &mut self.params.value_mut(id).data_mut()[0];
            *v = v.clamp(TAU_MIN, TAU_MAX);
        }
    }

    pub fn encode_image(&self, tape: &mut Tape, image: &Tensor) -> Result<ImageFeatures> {
        let (global, patches) = self.visual.encode(tape, &self.params, image)?;
        let quasi = self.qft.forward(tape, &self.params, patches)?;
        Ok(ImageFeatures { global, patches, quasi })
    }

    /// Encodes a two-image sample plus its report and applies the fusion
    /// rules.
    pub fn encode_pair(
        &self,
        tape: &mut Tape,
        images: &[Tensor; 2],
        report_tokens: &[usize],
    ) -> Result<PairFeatures> {
        let a = self.encode_image(tape, &images[0])?;
        let b = self.encode_image(tape, &images[1])?;
        let (q_avg, q_cat, v_avg) = fuse_pair(tape, a.quasi, b.quasi, a.global, b.global)?;
        let (t_global, t_tokens) = self.text.encode(tape, &self.params, report_tokens, None)?;
        Ok(PairFeatures { a, b, v_avg, q_avg, q_cat, t_global, t_tokens })
    }

    /// Persists config and weights. Layout: `model.json` plus the tensor
    /// checkpoint directory contract.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        save_checkpoint(dir, &self.params)
    }

    pub fn load(dir: &Path, eos_id: usize) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("model.json"))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join("model.json").display())))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Model::new(cfg, 0, eos_id)?;
        load_checkpoint(dir, &mut model.params)?;
        Ok(model)
    }
}

//! Pre-training loop: AdamW with decoupled weight decay, linear warmup plus
//! cosine annealing, per-step loss logging, early stopping on validation
//! loss, and the generation / retrieval / linear-probe evaluation harnesses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{scene_rng, Dataset, Entry, Granularity, QAPair};
use crate::error::{Error, Result};
use crate::losses::{
    cl_loss, combine_lm, qcl_loss, total_loss, LossWeights, NegativeBuffers,
};
use crate::metrics::{
    bleu, nodule_pr, retrieval_top_k_global, retrieval_top_k_sq, rouge_l, EvalReport,
    EvalSummary, GenEvalRecord,
};
use crate::model::Model;
use crate::tensor::{Ix, Params, Tape, Tensor, S};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ReportGen,
    Visual,
}

impl Preset {
    pub fn weights(self) -> LossWeights {
        match self {
            Preset::ReportGen => LossWeights::report_gen(),
            Preset::Visual => LossWeights::visual(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Negative-buffer capacity.
    pub buffer_size: usize,
    pub learning_rate: S,
    pub weight_decay: S,
    /// Fraction of total optimizer steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub preset: Preset,
    /// Hard cap on optimizer steps; the run stops mid-epoch when reached.
    pub max_steps: Option<usize>,
    /// Train on every entry and validate on the training split. Off by
    /// default; used by small-scale overfit runs where a 7:1:2 split would
    /// leave no usable validation set.
    pub train_on_all: bool,
    /// Explicit loss weights for ablation runs; overrides the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_override: Option<LossWeights>,
    /// Std of fresh Gaussian pixel noise added to every training image each
    /// batch. The rendered views are fixed on disk, so without this long
    /// contrastive runs memorize their noise patterns.
    #[serde(default)]
    pub augment_noise: S,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            buffer_size: 32,
            learning_rate: 1.0e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.4,
            epochs: 30,
            early_stop_patience: 5,
            seed: 0,
            preset: Preset::ReportGen,
            max_steps: None,
            train_on_all: false,
            weights_override: None,
            augment_noise: 0.0,
        }
    }
}

impl TrainConfig {
    /// Full-scale reference settings (batch 25, buffer 100, AdamW 2e-5).
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 25,
            buffer_size: 100,
            learning_rate: 2.0e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Annealing floor for the learning-rate schedule.
pub const LR_FLOOR: S = 1.0e-8;

/// Learning rate at optimizer step `step` (1-based) out of `total`: linear
/// warmup from 0 to peak over the first `warmup_fraction` of steps, then
/// cosine annealing down to [`LR_FLOOR`].
pub fn lr_at(step: usize, total: usize, peak: S, warmup_fraction: f64) -> S {
    assert!(total > 0 && step >= 1 && step <= total);
    let warm = (warmup_fraction * total as f64).round() as usize;
    if step <= warm {
        return peak * step as S / warm.max(1) as S;
    }
    if total == warm {
        return peak;
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    LR_FLOOR + (peak - LR_FLOOR) * cos as S
}

/// AdamW: Adam moments with bias correction plus decoupled weight decay
/// applied directly to the parameter, scaled by the current learning rate.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: S) -> Self {
        let m = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        let v = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1.0e-8, weight_decay, t: 0, m, v }
    }

    pub fn step(&mut self, params: &mut Params, lr: S) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..self.m.len() {
            let wd = lr * self.weight_decay;
            let grad = params.grad(id).clone();
            let value = params.value_mut(id);
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let m = &mut self.m[id].data_mut()[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[id].data_mut()[i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let p = &mut value.data_mut()[i];
                *p -= lr * mhat / (vhat.sqrt() + self.eps) + wd * *p;
            }
        }
    }
}

/// Token-encoded supervision for one scene: report ids and one QA pair per
/// granularity (question ids, answer ids ending in `[EOS]`).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub entry_index: usize,
    pub report_ids: Vec<usize>,
    pub qa: [(Vec<usize>, Vec<usize>); 3],
}

/// Uniformly draws one QA pair per granularity. Errors if any granularity is
/// unrepresented for the scene.
pub fn sample_qa<'a, R: Rng>(entry: &'a Entry, rng: &mut R) -> Result<[&'a QAPair; 3]> {
    let mut picked = Vec::with_capacity(3);
    for g in [Granularity::Coarse, Granularity::Medium, Granularity::Fine] {
        let pool: Vec<&QAPair> = entry.qa.iter().filter(|p| p.granularity == g).collect();
        if pool.is_empty() {
            return Err(Error::Invalid(format!(
                "scene {}: no {:?} QA pair",
                entry.scene.id, g
            )));
        }
        picked.push(pool[rng.random_range(0..pool.len())]);
    }
    Ok([picked[0], picked[1], picked[2]])
}

/// Tokenizes one scene's report and a chosen QA triple into a train item.
pub fn encode_item(ds: &Dataset, entry_index: usize, qa: [&QAPair; 3]) -> Result<TrainItem> {
    let entry = &ds.entries[entry_index];
    let report_ids = ds.vocab.encode_report(&entry.report)?;
    let enc = |p: &QAPair| -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((ds.vocab.encode_question(&p.question)?, ds.vocab.encode_answer(&p.answer)?))
    };
    Ok(TrainItem { entry_index, report_ids, qa: [enc(qa[0])?, enc(qa[1])?, enc(qa[2])?] })
}

/// Per-step loss decomposition, all host-side scalars.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLosses {
    pub total: S,
    pub cl: S,
    pub qcl: S,
    pub clm: S,
    pub mlm: S,
    pub flm: S,
}

struct BatchGraph {
    loss: Ix,
    losses: StepLosses,
    /// Detached per-sample features in batch order: (T, V_avg, Q_avg).
    features: Vec<(Tensor, Tensor, Tensor)>,
}

/// Builds the full loss graph for one batch on `tape`. Does not touch the
/// buffers; callers push the returned features after the backward pass.
fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    ds: &Dataset,
    items: &[TrainItem],
    buffers: &NegativeBuffers,
    weights: &LossWeights,
    mut augment: Option<(S, &mut ChaCha8Rng)>,
) -> Result<BatchGraph> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut v_batch = Vec::with_capacity(items.len());
    let mut q_batch = Vec::with_capacity(items.len());
    let mut t_batch = Vec::with_capacity(items.len());
    let mut lm_terms: [Vec<Ix>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut features = Vec::with_capacity(items.len());
    // Scenes without a nodule share a handful of report texts, so a batch
    // routinely contains entries whose reports (and images, up to noise) are
    // identical. Treating those as mutual negatives forces the encoders to
    // amplify render noise to tell them apart. Only the first entry per
    // report text enters the contrastive terms and the buffers; every entry
    // still contributes to the language-modeling losses.
    let mut seen_reports = std::collections::BTreeSet::new();
    for item in items {
        let entry = &ds.entries[item.entry_index];
        let pf = if let Some((sigma, rng)) = augment.as_mut() {
            let jittered =
                [perturbed(&entry.images[0], *sigma, rng), perturbed(&entry.images[1], *sigma, rng)];
            model.encode_pair(tape, &jittered, &item.report_ids)?
        } else {
            model.encode_pair(tape, &entry.images, &item.report_ids)?
        };
        for (slot, (q_ids, a_ids)) in lm_terms.iter_mut().zip(&item.qa) {
            let logits =
                model.generator.condition_and_score(tape, &model.params, pf.q_cat, q_ids, a_ids)?;
            let mask = vec![true; a_ids.len()];
            slot.push(tape.cross_entropy(logits, a_ids, &mask)?);
        }
        if seen_reports.insert(entry.report.as_str()) {
            v_batch.push(pf.v_avg);
            q_batch.push(pf.q_avg);
            t_batch.push(pf.t_global);
            features.push((
                tape.value(pf.t_global).clone(),
                tape.value(pf.v_avg).clone(),
                tape.value(pf.q_avg).clone(),
            ));
        }
    }
    let tau_c = model.tau_c_node(tape);
    let tau_q = model.tau_q_node(tape);
    let l_cl = cl_loss(tape, &v_batch, &t_batch, buffers, tau_c)?;
    let l_qcl = qcl_loss(tape, &q_batch, &t_batch, buffers, tau_q)?;
    let mut lm_means = [0; 3];
    for (i, terms) in lm_terms.iter().enumerate() {
        let stacked = tape.stack_scalars(terms)?;
        lm_means[i] = tape.mean_all(stacked);
    }
    let l_lm = combine_lm(tape, lm_means[0], lm_means[1], lm_means[2], weights)?;
    let loss = total_loss(tape, l_cl, l_qcl, l_lm, weights.lambda)?;
    let losses = StepLosses {
        total: tape.value(loss).item(),
        cl: tape.value(l_cl).item(),
        qcl: tape.value(l_qcl).item(),
        clm: tape.value(lm_means[0]).item(),
        mlm: tape.value(lm_means[1]).item(),
        flm: tape.value(lm_means[2]).item(),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("non-finite loss: {losses:?}")));
    }
    let recomposed = weights.lambda * losses.cl
        + losses.qcl
        + (weights.lambda_c * losses.clm + weights.lambda_m * losses.mlm)
        + weights.lambda_f * losses.flm;
    if (recomposed - losses.total).abs() > 1.0e-4 {
        return Err(Error::Invalid(format!(
            "loss decomposition drift: total {} vs recomposed {recomposed}",
            losses.total
        )));
    }
    Ok(BatchGraph { loss, losses, features })
}

/// One optimizer step over a batch: forward, backward, AdamW update, then
/// buffer push (in that order, so the current batch never sees itself as a
/// buffered negative).
pub fn train_step(
    model: &mut Model,
    ds: &Dataset,
    items: &[TrainItem],
    buffers: &mut NegativeBuffers,
    weights: &LossWeights,
    opt: &mut AdamW,
    lr: S,
    augment: Option<(S, &mut ChaCha8Rng)>,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let graph = batch_loss(&mut tape, model, ds, items, buffers, weights, augment)?;
    model.params.zero_grads();
    tape.backward(graph.loss, &mut model.params);
    opt.step(&mut model.params, lr);
    model.project_taus();
    let mut t = Vec::with_capacity(graph.features.len());
    let mut v = Vec::with_capacity(graph.features.len());
    let mut q = Vec::with_capacity(graph.features.len());
    for (ft, fv, fq) in graph.features {
        t.push(ft);
        v.push(fv);
        q.push(fq);
    }
    buffers.push(&t, &v, &q);
    Ok(graph.losses)
}

/// Forward-only batch loss against the current buffer contents.
pub fn eval_loss(
    model: &Model,
    ds: &Dataset,
    items: &[TrainItem],
    buffers: &NegativeBuffers,
    weights: &LossWeights,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    Ok(batch_loss(&mut tape, model, ds, items, buffers, weights, None)?.losses)
}

/// Copy of `image` with fresh Gaussian noise, clamped back to [0, 1].
fn perturbed(image: &Tensor, sigma: S, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + crate::datagen::gauss(rng) * sigma).clamp(0.0, 1.0);
    }
    out
}

/// Deterministic 7:1:2 index split in dataset order.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n_train = (n as f64 * 0.7).floor() as usize;
    let n_val = (n as f64 * 0.1).floor() as usize;
    let train = (0..n_train).collect();
    let val = (n_train..n_train + n_val).collect();
    let test = (n_train + n_val..n).collect();
    (train, val, test)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: StepLosses,
    pub lr: S,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub best_val_loss: S,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps_run: usize,
    /// Mean training total loss over the last completed epoch.
    pub final_train_loss: S,
    pub test_indices: Vec<usize>,
}

fn epoch_items(ds: &Dataset, indices: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<Vec<TrainItem>> {
    // Stream 7 keeps QA sampling independent from world generation and
    // rendering streams.
    let mut rng = scene_rng(cfg.seed, epoch, 7);
    let mut order: Vec<usize> = indices.to_vec();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            let qa = sample_qa(&ds.entries[i], &mut rng)?;
            encode_item(ds, i, qa)
        })
        .collect()
}

/// Runs the full pre-training loop. When `out` is given, writes
/// `metrics.csv` plus `best/` and `final/` checkpoints under it.
pub fn pretrain(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights = cfg.weights_override.unwrap_or_else(|| cfg.preset.weights());
    weights.validate()?;
    let n = ds.entries.len();
    let (train_idx, val_idx) = if cfg.train_on_all {
        ((0..n).collect::<Vec<_>>(), (0..n).collect::<Vec<_>>())
    } else {
        let (tr, va, _) = split_indices(n);
        (tr, va)
    };
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Invalid(format!(
            "dataset of {n} scenes produces an empty train or validation split"
        )));
    }
    let test_indices = if cfg.train_on_all { vec![] } else { split_indices(n).2 };

    let mut buffers = NegativeBuffers::new(cfg.buffer_size);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let planned = (cfg.epochs * steps_per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    if planned == 0 {
        return Err(Error::Config("zero optimizer steps planned".into()));
    }

    let mut csv = String::from("step,epoch,L_total,L_cl,L_qcl,l_clm,l_mlm,l_flm,lr\n");
    let mut records = Vec::new();
    let mut best_val = S::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut final_train_loss = S::NAN;

    'outer: for epoch in 0..cfg.epochs {
        let items = epoch_items(ds, &train_idx, cfg, epoch)?;
        let mut aug_rng = scene_rng(cfg.seed, epoch, 17);
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for batch in items.chunks(cfg.batch_size) {
            step += 1;
            let lr = lr_at(step, planned, cfg.learning_rate, cfg.warmup_fraction);
            let augment =
                (cfg.augment_noise > 0.0).then_some((cfg.augment_noise, &mut aug_rng));
            let losses = train_step(model, ds, batch, &mut buffers, &weights, &mut opt, lr, augment)?;
            epoch_sum += losses.total * batch.len() as S;
            epoch_count += batch.len();
            let _ = writeln!(
                csv,
                "{step},{epoch},{},{},{},{},{},{},{lr}",
                losses.total, losses.cl, losses.qcl, losses.clm, losses.mlm, losses.flm
            );
            records.push(StepRecord { step, epoch, losses, lr });
            if step >= planned {
                epochs_run = epoch + 1;
                final_train_loss = epoch_sum / epoch_count as S;
                break 'outer;
            }
        }
        epochs_run = epoch + 1;
        final_train_loss = epoch_sum / epoch_count as S;

        // Validation pass: same loss structure, frozen buffers, QA pairs
        // redrawn from a disjoint stream so the draw is deterministic.
        let val_items = {
            let mut rng = scene_rng(cfg.seed, epoch, 11);
            val_idx
                .iter()
                .map(|&i| {
                    let qa = sample_qa(&ds.entries[i], &mut rng)?;
                    encode_item(ds, i, qa)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let mut val_sum = 0.0;
        for batch in val_items.chunks(cfg.batch_size) {
            let l = eval_loss(model, ds, batch, &buffers, &weights)?;
            val_sum += l.total * batch.len() as S;
        }
        let val_loss = val_sum / val_items.len() as S;
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            since_best = 0;
            if let Some(dir) = out {
                model.save(&dir.join("best"))?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        model.save(&dir.join("final"))?;
        if !dir.join("best").exists() {
            model.save(&dir.join("best"))?;
        }
    }
    Ok(TrainOutcome {
        records,
        best_val_loss: best_val,
        best_epoch,
        epochs_run,
        steps_run: step,
        final_train_loss,
        test_indices,
    })
}

/// Checkpoint path helper: prefers `best/` under a training output
/// directory, falls back to the directory itself.
pub fn resolve_checkpoint(dir: &Path) -> PathBuf {
    let best = dir.join("best");
    if best.join("manifest.json").exists() {
        best
    } else {
        dir.to_path_buf()
    }
}

/// Frozen visual features for one entry: the two-view averaged global
/// feature `V_avg` as a plain vector.
pub fn visual_feature(model: &Model, entry: &Entry) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let a = model.encode_image(&mut tape, &entry.images[0])?;
    let b = model.encode_image(&mut tape, &entry.images[1])?;
    let sum = tape.add(a.global, b.global)?;
    let avg = tape.scale(sum, 0.5);
    Ok(tape.value(avg).data().to_vec())
}

/// Trains a logistic-regression probe on frozen `V_avg` features for the
/// nodule-presence label and reports held-out accuracy. The split is
/// stratified and deterministic: within each class, alternate entries go to
/// train and test. Rejects single-class inputs.
pub fn linear_probe(model: &Model, ds: &Dataset, indices: &[usize], seed: u64) -> Result<f64> {
    let labels: Vec<bool> =
        indices.iter().map(|&i| ds.entries[i].scene.nodule_present()).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::Invalid("linear probe requires both classes present".into()));
    }
    let feats: Vec<Vec<S>> = indices
        .iter()
        .map(|&i| visual_feature(model, &ds.entries[i]))
        .collect::<Result<_>>()?;
    let d = feats[0].len();

    let mut train: Vec<usize> = Vec::new();
    let mut test: Vec<usize> = Vec::new();
    for class in [true, false] {
        for (rank, pos) in (0..labels.len()).filter(|&i| labels[i] == class).enumerate() {
            if rank % 2 == 0 { &mut train } else { &mut test }.push(pos);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid("linear probe split left an empty side".into()));
    }

    let mut params = Params::new();
    let mut rng = scene_rng(seed, 0, 13);
    params.register("probe.w", Tensor::randn(&[d, 2], 0.01, &mut rng));
    params.register("probe.b", Tensor::zeros(&[2]));
    let mut opt = AdamW::new(&params, 0.0);
    let x_train = Tensor::matrix(
        train.len(),
        d,
        train.iter().flat_map(|&i| feats[i].iter().copied()).collect(),
    )?;
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i] as usize).collect();
    let mask = vec![true; y_train.len()];
    for _ in 0..400 {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let w = tape.param(&params, 0);
        let b = tape.param(&params, 1);
        let wx = tape.matmul(x, w)?;
        let logits = tape.add_row(wx, b)?;
        let loss = tape.cross_entropy(logits, &y_train, &mask)?;
        params.zero_grads();
        tape.backward(loss, &mut params);
        opt.step(&mut params, 0.05);
    }

    let w = params.value(0).data();
    let b = params.value(1).data();
    let mut correct = 0usize;
    for &i in &test {
        let mut scores = [b[0], b[1]];
        for (j, &xj) in feats[i].iter().enumerate() {
            scores[0] += xj * w[j * 2];
            scores[1] += xj * w[j * 2 + 1];
        }
        let pred = scores[1] > scores[0];
        if pred == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Greedy report generation plus retrieval over an evaluation slice.
/// References are the size-masked ground-truth reports, matching the
/// generator's training targets.
pub fn evaluate(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.len() < 2 {
        return Err(Error::Invalid("evaluation needs at least 2 scenes".into()));
    }
    let mut records = Vec::with_capacity(indices.len());
    let mut v_feats = Vec::new();
    let mut q_blocks = Vec::new();
    let mut t_feats = Vec::new();
    let mut generated = Vec::new();
    let mut labels = Vec::new();
    let mut exact = 0usize;
    let mut sums = [0.0f64; 5];
    for &i in indices {
        let entry = &ds.entries[i];
        let report_ids = ds.vocab.encode_report(&entry.report)?;
        let mut tape = Tape::new();
        let pf = model.encode_pair(&mut tape, &entry.images, &report_ids)?;
        v_feats.push(tape.value(pf.v_avg).data().to_vec());
        q_blocks.push(tape.value(pf.q_avg).clone());
        t_feats.push(tape.value(pf.t_global).data().to_vec());
        let q_cat = tape.value(pf.q_cat).clone();

        let coarse = entry
            .qa
            .iter()
            .find(|p| p.granularity == Granularity::Coarse)
            .ok_or_else(|| Error::Invalid(format!("scene {}: no coarse QA", entry.scene.id)))?;
        let q_ids = ds.vocab.encode_question(&coarse.question)?;
        let out_ids = model.generator.generate(&model.params, &q_cat, &q_ids)?;
        let gen_text = ds.vocab.detokenize(&out_ids)?;
        let reference = coarse.answer.clone();
        if gen_text == reference {
            exact += 1;
        }
        let cand: Vec<&str> = gen_text.split_whitespace().collect();
        let refs: Vec<&str> = reference.split_whitespace().collect();
        let b: Vec<f64> = (1..=4).map(|n| bleu(&cand, &refs, n)).collect::<Result<_>>()?;
        let r = if cand.is_empty() { 0.0 } else { rouge_l(&cand, &refs)? };
        for (s, v) in sums.iter_mut().zip(b.iter().chain(std::iter::once(&r))) {
            *s += v;
        }
        records.push(GenEvalRecord {
            id: entry.scene.id,
            reference: reference.clone(),
            generated: gen_text.clone(),
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            rouge_l: r,
        });
        generated.push(gen_text);
        labels.push(entry.scene.nodule_present());
    }
    let n = indices.len() as f64;
    let (nodule_precision, nodule_recall) = if labels.iter().any(|&l| l) {
        nodule_pr(&generated, &labels)?
    } else {
        (None, 1.0)
    };
    let summary = EvalSummary {
        bleu1: sums[0] / n,
        bleu2: sums[1] / n,
        bleu3: sums[2] / n,
        bleu4: sums[3] / n,
        rouge_l: sums[4] / n,
        nodule_precision,
        nodule_recall,
        retrieval_top1: retrieval_top_k_global(&v_feats, &t_feats, 1)?,
        retrieval_top1_sq: retrieval_top_k_sq(&q_blocks, &t_feats, 1)?,
        exact_match: exact as f64 / n,
    };
    Ok(EvalReport { records, summary })
}

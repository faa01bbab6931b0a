//! Optimizer, schedule, splits, QA sampling, the pre-training loop, and the
//! run configuration layer.

use std::collections::BTreeMap;
use std::path::Path;

use tempfile::tempdir;

use qvqa::config::RunConfig;
use qvqa::datagen::{build_dataset, scene_rng, Granularity, EOS};
use qvqa::encoders::{TextEncoderConfig, VisualEncoderConfig};
use qvqa::losses::{LossWeights, NegativeBuffers};
use qvqa::model::{Model, ModelConfig};
use qvqa::qft::QftConfig;
use qvqa::tensor::S;
use qvqa::trainer::{
    eval_loss, linear_probe, lr_at, pretrain, resolve_checkpoint, sample_qa, split_indices,
    visual_feature, Preset, TrainConfig, LR_FLOOR,
};

fn tiny_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        visual: VisualEncoderConfig {
            image_size: 64,
            patch_size: 16,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
        },
        text: TextEncoderConfig { vocab_size, max_len: 64, d_model: 16, n_layers: 1, n_heads: 2 },
        qft: QftConfig { m: 2, d_model: 16, n_layers: 1, n_heads: 2 },
        gen_layers: 1,
        max_gen_len: 24,
    }
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        buffer_size: 8,
        learning_rate: 1.0e-3,
        epochs: 2,
        train_on_all: true,
        ..TrainConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn lr_schedule_warms_up_then_anneals() {
    let (total, peak, frac) = (100, 1.0e-3 as S, 0.4);
    // Linear ramp hits the peak exactly at the end of warmup.
    assert!((lr_at(40, total, peak, frac) - peak).abs() < 1e-12);
    for s in 2..=40 {
        assert!(lr_at(s, total, peak, frac) > lr_at(s - 1, total, peak, frac));
    }
    // Cosine decay afterwards: monotone down to the floor.
    for s in 42..=100 {
        assert!(lr_at(s, total, peak, frac) < lr_at(s - 1, total, peak, frac));
    }
    assert!(lr_at(100, total, peak, frac) <= lr_at(70, total, peak, frac));
    assert!((lr_at(100, total, peak, frac) - LR_FLOOR).abs() < peak * 1e-3);
    // Degenerate schedules stay defined.
    assert_eq!(lr_at(1, 1, peak, 1.0), peak);
    assert!(lr_at(1, 1, peak, 0.0) > 0.0);
}

#[test]
fn split_is_seven_one_two_in_dataset_order() {
    let (tr, va, te) = split_indices(10);
    assert_eq!(tr, (0..7).collect::<Vec<_>>());
    assert_eq!(va, vec![7]);
    assert_eq!(te, vec![8, 9]);

    let (tr, va, te) = split_indices(20);
    assert_eq!((tr.len(), va.len(), te.len()), (14, 2, 4));

    // Small n floors toward train; nothing is ever dropped.
    let (tr, va, te) = split_indices(8);
    assert_eq!((tr.len(), va.len(), te.len()), (5, 0, 3));
    assert_eq!(tr.len() + va.len() + te.len(), 8);
}

#[test]
fn qa_sampling_is_per_granularity_and_uniform() {
    let ds = build_dataset(2, 40).unwrap();
    let entry = ds
        .entries
        .iter()
        .find(|e| e.scene.nodule.is_some())
        .expect("40 scenes contain a positive");
    let medium: Vec<&str> = entry
        .qa
        .iter()
        .filter(|p| p.granularity == Granularity::Medium)
        .map(|p| p.question.as_str())
        .collect();
    assert_eq!(medium.len(), 2);

    let mut rng = scene_rng(5, 0, 7);
    let mut first = 0usize;
    for _ in 0..10_000 {
        let picked = sample_qa(entry, &mut rng).unwrap();
        assert_eq!(picked[0].granularity, Granularity::Coarse);
        assert_eq!(picked[1].granularity, Granularity::Medium);
        assert_eq!(picked[2].granularity, Granularity::Fine);
        if picked[1].question == medium[0] {
            first += 1;
        }
    }
    // Binomial(10000, 0.5): 3 sigma is 150.
    assert!((4800..=5200).contains(&first), "medium draw count {first}");

    // Same stream, same draws.
    let a = sample_qa(entry, &mut scene_rng(9, 3, 7)).unwrap();
    let b = sample_qa(entry, &mut scene_rng(9, 3, 7)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.question, y.question);
        assert_eq!(x.answer, y.answer);
    }
}

#[test]
fn eval_loss_decomposes_into_its_terms() {
    let ds = build_dataset(3, 4).unwrap();
    let model = Model::new(tiny_model_config(ds.vocab.len()), 0, EOS).unwrap();
    let buffers = NegativeBuffers::new(8);
    let cfg = tiny_train_config();
    let mut rng = scene_rng(cfg.seed, 0, 7);
    let items: Vec<_> = (0..4)
        .map(|i| {
            let qa = sample_qa(&ds.entries[i], &mut rng).unwrap();
            qvqa::trainer::encode_item(&ds, i, qa).unwrap()
        })
        .collect();
    let w = LossWeights::report_gen();
    let l = eval_loss(&model, &ds, &items, &buffers, &w).unwrap();
    let recomposed =
        w.lambda * l.cl + l.qcl + w.lambda_c * l.clm + w.lambda_m * l.mlm + w.lambda_f * l.flm;
    assert!((l.total - recomposed).abs() < 1e-4, "{} vs {recomposed}", l.total);

    // With every LM weight and lambda zeroed the total is the QCL term alone.
    let w0 = LossWeights { lambda: 0.0, lambda_c: 0.0, lambda_m: 0.0, lambda_f: 0.0 };
    let l0 = eval_loss(&model, &ds, &items, &buffers, &w0).unwrap();
    assert_eq!(l0.total, l0.qcl);
}

#[test]
fn pretrain_is_bit_deterministic() {
    let ds = build_dataset(1, 6).unwrap();
    let cfg = tiny_train_config();
    let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
    for d in [&d1, &d2] {
        let mut model = Model::new(tiny_model_config(ds.vocab.len()), cfg.seed, EOS).unwrap();
        pretrain(&mut model, &ds, &cfg, Some(d.path())).unwrap();
    }
    for sub in ["best", "final"] {
        assert_eq!(
            dir_bytes(&d1.path().join(sub)),
            dir_bytes(&d2.path().join(sub)),
            "{sub} checkpoints differ"
        );
    }
    assert_eq!(
        std::fs::read(d1.path().join("metrics.csv")).unwrap(),
        std::fs::read(d2.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn pretrain_writes_metrics_and_checkpoints() {
    let ds = build_dataset(4, 6).unwrap();
    let cfg = tiny_train_config();
    let dir = tempdir().unwrap();
    let mut model = Model::new(tiny_model_config(ds.vocab.len()), cfg.seed, EOS).unwrap();
    let outcome = pretrain(&mut model, &ds, &cfg, Some(dir.path())).unwrap();
    // 6 scenes, batch 3, 2 epochs.
    assert_eq!(outcome.steps_run, 4);
    assert_eq!(outcome.epochs_run, 2);
    assert!(outcome.final_train_loss.is_finite());

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,L_total,L_cl,L_qcl,l_clm,l_mlm,l_flm,lr");
    assert_eq!(lines.count(), outcome.steps_run);

    assert!(dir.path().join("best/manifest.json").exists());
    assert!(dir.path().join("final/manifest.json").exists());
    assert_eq!(resolve_checkpoint(dir.path()), dir.path().join("best"));
    // A bare checkpoint directory resolves to itself.
    assert_eq!(resolve_checkpoint(&dir.path().join("final")), dir.path().join("final"));
}

#[test]
fn max_steps_caps_the_run_mid_epoch() {
    let ds = build_dataset(4, 6).unwrap();
    let cfg = TrainConfig { max_steps: Some(3), epochs: 5, ..tiny_train_config() };
    let mut model = Model::new(tiny_model_config(ds.vocab.len()), cfg.seed, EOS).unwrap();
    let outcome = pretrain(&mut model, &ds, &cfg, None).unwrap();
    assert_eq!(outcome.steps_run, 3);
    assert_eq!(outcome.epochs_run, 2);
}

#[test]
fn early_stopping_fires_after_patience_epochs() {
    let ds = build_dataset(6, 6).unwrap();
    // A learning rate far below f32 resolution freezes the weights, and the
    // growing negative buffers can only raise the validation loss, so the
    // first epoch stays the best and patience counts the rest.
    let cfg = TrainConfig {
        learning_rate: 1.0e-20,
        epochs: 10,
        early_stop_patience: 2,
        ..tiny_train_config()
    };
    let mut model = Model::new(tiny_model_config(ds.vocab.len()), cfg.seed, EOS).unwrap();
    let outcome = pretrain(&mut model, &ds, &cfg, None).unwrap();
    assert_eq!(outcome.best_epoch, 0);
    assert_eq!(outcome.epochs_run, 3);
}

#[test]
fn invalid_train_configs_are_rejected() {
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { warmup_fraction: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { weight_decay: -0.1, ..TrainConfig::default() }.validate().is_err());
    let full = TrainConfig::full_scale();
    assert_eq!((full.batch_size, full.buffer_size), (25, 100));
    assert!((full.learning_rate - 2.0e-5).abs() < 1e-12);
}

#[test]
fn probe_features_and_class_requirements() {
    let ds = build_dataset(8, 10).unwrap();
    let model = Model::new(tiny_model_config(ds.vocab.len()), 0, EOS).unwrap();
    let f = visual_feature(&model, &ds.entries[0]).unwrap();
    assert_eq!(f.len(), 16);

    let negatives: Vec<usize> = (0..ds.entries.len())
        .filter(|&i| ds.entries[i].scene.nodule.is_none())
        .collect();
    assert!(negatives.len() >= 2, "world of 10 scenes has negatives");
    assert!(linear_probe(&model, &ds, &negatives, 0).is_err());

    let all: Vec<usize> = (0..ds.entries.len()).collect();
    let acc = linear_probe(&model, &ds, &all, 0).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn config_file_and_overrides_resolve_into_typed_fields() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(
        &path,
        r#"{"train.lr": 0.01, "train.epochs": 3, "model.m": 4, "train.train_on_all": true}"#,
    )
    .unwrap();
    let mut rc = RunConfig::load(&path).unwrap();
    rc.set_override("train.epochs=7").unwrap();
    rc.set_override("model.heads=2").unwrap();
    let mut train = TrainConfig::default();
    let mut model = ModelConfig::default();
    rc.apply(&mut train, &mut model).unwrap();
    assert!((train.learning_rate - 0.01).abs() < 1e-9);
    assert_eq!(train.epochs, 7);
    assert!(train.train_on_all);
    assert_eq!(model.qft.m, 4);
    assert_eq!(model.visual.n_heads, 2);
    assert_eq!(model.text.n_heads, 2);
}

#[test]
fn config_rejects_unknown_keys_nesting_and_bad_types() {
    let mut rc = RunConfig::empty();
    rc.set_override("train.lrr=0.01").unwrap();
    let mut train = TrainConfig::default();
    let mut model = ModelConfig::default();
    let err = rc.apply(&mut train, &mut model).unwrap_err();
    assert!(err.to_string().contains("train.lrr"), "{err}");

    let mut rc = RunConfig::empty();
    rc.set_override("train.epochs=maybe").unwrap();
    assert!(rc.apply(&mut train, &mut model).is_err());

    assert!(RunConfig::empty().set_override("no-equals-sign").is_err());

    let dir = tempdir().unwrap();
    let nested = dir.path().join("nested.json");
    std::fs::write(&nested, r#"{"train": {"lr": 0.01}}"#).unwrap();
    assert!(RunConfig::load(&nested).is_err());
}

#[test]
fn resolved_config_records_the_preset_weights() {
    let model = ModelConfig::default();
    let train = TrainConfig { preset: Preset::ReportGen, ..TrainConfig::default() };
    let rc = RunConfig::resolved(&train, &model);
    assert_eq!(rc.get("train.preset").unwrap(), "report_gen");
    assert_eq!(rc.get("loss.lambda").unwrap().as_f64().unwrap(), 1.0);
    assert_eq!(rc.get("loss.lambda_c").unwrap().as_f64().unwrap(), 9.0);
    assert_eq!(rc.get("loss.lambda_m").unwrap().as_f64().unwrap(), 1.0);
    assert_eq!(rc.get("loss.lambda_f").unwrap().as_f64().unwrap(), 3.0);

    let train = TrainConfig { preset: Preset::Visual, ..TrainConfig::default() };
    let rc = RunConfig::resolved(&train, &model);
    assert_eq!(rc.get("loss.lambda_c").unwrap().as_f64().unwrap(), 1.0);
    assert_eq!(rc.get("loss.lambda_m").unwrap().as_f64().unwrap(), 3.0);
    assert_eq!(rc.get("loss.lambda_f").unwrap().as_f64().unwrap(), 9.0);

    // Round trip through disk keeps the dump readable and flat.
    let dir = tempdir().unwrap();
    let p = dir.path().join("config.json");
    rc.save(&p).unwrap();
    let back = RunConfig::load(&p).unwrap();
    assert_eq!(back.get("loss.lambda_f").unwrap().as_f64().unwrap(), 9.0);
}

//! Throwaway calibration harness (not shipped behavior).

use std::collections::BTreeSet;

use qvqa::datagen::{build_dataset, Dataset, EOS};
use qvqa::encoders::{TextEncoderConfig, VisualEncoderConfig};
use qvqa::model::{Model, ModelConfig};
use qvqa::qft::QftConfig;
use qvqa::trainer::{evaluate, pretrain, Preset, TrainConfig};

fn distinct_indices(ds: &Dataset, want: usize) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, e) in ds.entries.iter().enumerate() {
        if seen.insert(e.report.clone()) {
            out.push(i);
            if out.len() == want {
                break;
            }
        }
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let buffer: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let d: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(32);
    let seed: u64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(0);

    let n = 256;
    let ds = build_dataset(33, 420).unwrap();
    let mut seen = BTreeSet::new();
    let mut held_idx = Vec::new();
    for i in n..ds.entries.len() {
        if seen.insert(ds.entries[i].report.clone()) {
            held_idx.push(i);
            if held_idx.len() == 64 {
                break;
            }
        }
    }
    println!("held-out {} distinct", held_idx.len());
    let held = Dataset {
        entries: held_idx.iter().map(|&i| ds.entries[i].clone()).collect(),
        vocab: ds.vocab.clone(),
        seed: ds.seed,
    };
    let train = Dataset {
        entries: ds.entries[..n].to_vec(),
        vocab: ds.vocab.clone(),
        seed: ds.seed,
    };
    let cfg = TrainConfig {
        batch_size: batch,
        buffer_size: buffer,
        learning_rate: lr as _,
        warmup_fraction: 0.05,
        epochs,
        early_stop_patience: usize::MAX,
        train_on_all: true,
        seed,
        preset: Preset::ReportGen,
        augment_noise: args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.01),
        weights_override: args.get(7).filter(|s| s.as_str() != "-").map(|s| {
            let p: Vec<f64> = s.split(',').map(|x| x.parse().unwrap()).collect();
            qvqa::losses::LossWeights {
                lambda: p[0] as _,
                lambda_c: p[1] as _,
                lambda_m: p[2] as _,
                lambda_f: p[3] as _,
            }
        }),
        ..TrainConfig::default()
    };
    let mc = ModelConfig {
        visual: VisualEncoderConfig {
            image_size: 64,
            patch_size: args.get(6).map(|s| s.parse().unwrap()).unwrap_or(16),
            d_model: d,
            n_layers: args.get(9).map(|s| s.parse().unwrap()).unwrap_or(2),
            n_heads: 4,
        },
        text: TextEncoderConfig { vocab_size: ds.vocab.len(), max_len: 64, d_model: d, n_layers: 2, n_heads: 4 },
        qft: QftConfig { m: 4, d_model: d, n_layers: 2, n_heads: 4 },
        gen_layers: 2,
        max_gen_len: 32,
    };
    let start = std::time::Instant::now();
    let run_dir = std::env::temp_dir().join("qvqa-scratch-run");
    let _ = std::fs::remove_dir_all(&run_dir);
    std::fs::create_dir_all(&run_dir).unwrap();
    let mut model = Model::new(mc.clone(), seed, EOS).unwrap();
    let outcome = pretrain(&mut model, &train, &cfg, Some(run_dir.as_path())).unwrap();
    println!("best epoch {} of {}", outcome.best_epoch, outcome.epochs_run);
    for r in outcome.records.iter().step_by((outcome.records.len() / 20).max(1)) {
        println!(
            "step {:4} cl {:.4} qcl {:.4} clm {:.4} lr {:.2e}",
            r.step, r.losses.cl, r.losses.qcl, r.losses.clm, r.lr
        );
    }
    println!("train time {:.0}s", start.elapsed().as_secs_f64());
    for name in ["loss.tau_c", "loss.tau_q"] {
        let id = model.params.id_of(name).unwrap();
        println!("{name} = {:?}", model.params.value(id).data());
    }

    let all: Vec<usize> = (0..64).collect();
    let rep = evaluate(&model, &held, &all).unwrap();
    println!(
        "held-out top1 {:.3} sq {:.3} bleu4 {:.3}",
        rep.summary.retrieval_top1, rep.summary.retrieval_top1_sq, rep.summary.bleu4
    );
    let train_idx = distinct_indices(&train, 64);
    let train_sub = Dataset {
        entries: train_idx.iter().map(|&i| train.entries[i].clone()).collect(),
        vocab: ds.vocab.clone(),
        seed: ds.seed,
    };
    let rep = evaluate(&model, &train_sub, &all).unwrap();
    println!(
        "train top1 {:.3} sq {:.3}",
        rep.summary.retrieval_top1, rep.summary.retrieval_top1_sq
    );
    if let Ok(best) = Model::load(&run_dir.join("best"), EOS) {
        let rep = evaluate(&best, &held, &all).unwrap();
        println!(
            "best-ckpt held-out top1 {:.3} sq {:.3} bleu4 {:.3}",
            rep.summary.retrieval_top1, rep.summary.retrieval_top1_sq, rep.summary.bleu4
        );
    }

    // Confusion diagnostic: whose text wins for each held-out image?
    let mut v_feats = Vec::new();
    let mut t_feats = Vec::new();
    for e in &held.entries {
        let ids = held.vocab.encode_report(&e.report).unwrap();
        let mut tape = qvqa::tensor::Tape::new();
        let pf = model.encode_pair(&mut tape, &e.images, &ids).unwrap();
        v_feats.push(tape.value(pf.v_avg).data().to_vec());
        t_feats.push(tape.value(pf.t_global).data().to_vec());
    }
    let cos = |a: &[qvqa::tensor::S], b: &[qvqa::tensor::S]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum();
        let na: f64 = a.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut organ_ok = 0;
    let mut echo_ok = 0;
    let mut quad_ok = 0;
    let mut pres_ok = 0;
    let mut size_gap = Vec::new();
    for i in 0..64 {
        let best = (0..64)
            .max_by(|&a, &b| {
                cos(&v_feats[i], &t_feats[a]).partial_cmp(&cos(&v_feats[i], &t_feats[b])).unwrap()
            })
            .unwrap();
        let (si, sb) = (&held.entries[i].scene, &held.entries[best].scene);
        organ_ok += (si.organ == sb.organ) as usize;
        echo_ok += (si.echo_texture == sb.echo_texture) as usize;
        pres_ok += (si.nodule.is_some() == sb.nodule.is_some()) as usize;
        if let (Some(ni), Some(nb)) = (&si.nodule, &sb.nodule) {
            quad_ok += (ni.quadrant == nb.quadrant) as usize;
            size_gap.push((ni.size_units as i64 - nb.size_units as i64).abs());
        }
    }
    println!(
        "winner attribute match: organ {organ_ok}/64 echo {echo_ok}/64 presence {pres_ok}/64 quad {quad_ok}/pos mean|dsize| {:.2}",
        size_gap.iter().sum::<i64>() as f64 / size_gap.len().max(1) as f64
    );
}

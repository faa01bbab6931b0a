//! Synthetic world, rendering, report templates, QA derivation, vocabulary.

use std::collections::BTreeSet;

use tempfile::tempdir;

use qvqa::datagen::{
    build_dataset, derive_qa, generate_world, load_dataset, mask_sizes, render_images,
    render_report, save_dataset, Echo, Granularity, Nodule, Organ, Quadrant, Scene, Vocabulary,
    CLS, EOS, IMAGE_SIZE, NOISE_COARSE, NOISE_SMOOTH, PAD, SEP, SIZE_MAX, SIZE_MIN, SIZE_TOK,
};
use qvqa::tensor::{Tensor, S};

fn scene(organ: Organ, echo: Echo, nodule: Option<(Quadrant, u32)>) -> Scene {
    Scene {
        id: 0,
        organ,
        echo_texture: echo,
        nodule: nodule.map(|(quadrant, size_units)| Nodule { quadrant, size_units }),
    }
}

fn quadrant_mean(img: &Tensor, q: Quadrant) -> S {
    let (x0, y0, x1, y1) = q.bounds();
    let mut sum = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            sum += img.data()[y * IMAGE_SIZE + x];
        }
    }
    sum / ((x1 - x0) * (y1 - y0)) as S
}

#[test]
fn world_generation_is_deterministic() {
    let a = generate_world(7, 4).unwrap();
    let b = generate_world(7, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    for (i, s) in a.iter().enumerate() {
        assert_eq!(s.id, i);
        if let Some(n) = &s.nodule {
            assert!((SIZE_MIN..=SIZE_MAX).contains(&n.size_units));
        }
    }
}

#[test]
fn world_positives_follow_a_fair_coin() {
    let scenes = generate_world(3, 1000).unwrap();
    let positives = scenes.iter().filter(|s| s.nodule.is_some()).count();
    assert!((450..=550).contains(&positives), "positives {positives}");
}

#[test]
fn single_scene_world_is_valid() {
    let scenes = generate_world(11, 1).unwrap();
    assert_eq!(scenes.len(), 1);
    assert!(generate_world(11, 0).is_err());
}

#[test]
fn rendering_is_deterministic_and_views_differ() {
    let s = scene(Organ::Breast, Echo::Smooth, Some((Quadrant::UpperOuter, 10)));
    let (a1, b1) = render_images(&s, 5);
    let (a2, b2) = render_images(&s, 5);
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    // The two views share the scene but not the noise stream.
    assert_ne!(a1, b1);
    assert_eq!(a1.shape(), [IMAGE_SIZE, IMAGE_SIZE]);
    assert!(a1.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn nodule_quadrant_is_darkest_in_both_views() {
    for organ in [Organ::Breast, Organ::Thyroid] {
        for echo in [Echo::Smooth, Echo::Coarse] {
            for q in [
                Quadrant::UpperOuter,
                Quadrant::UpperInner,
                Quadrant::LowerOuter,
                Quadrant::LowerInner,
            ] {
                // Smallest nodule: the hardest case for the contrast check.
                let s = scene(organ, echo, Some((q, SIZE_MIN)));
                let (a, b) = render_images(&s, 42);
                for img in [&a, &b] {
                    let target = quadrant_mean(img, q);
                    for other in [
                        Quadrant::UpperOuter,
                        Quadrant::UpperInner,
                        Quadrant::LowerOuter,
                        Quadrant::LowerInner,
                    ] {
                        if other != q {
                            assert!(
                                target < quadrant_mean(img, other),
                                "{organ:?} {echo:?} nodule at {q:?} not darkest"
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn negative_scene_quadrants_stay_near_the_global_mean() {
    for echo in [Echo::Smooth, Echo::Coarse] {
        let s = scene(Organ::Thyroid, echo, None);
        let (a, _) = render_images(&s, 9);
        let global: S = a.data().iter().sum::<S>() / a.numel() as S;
        let sigma = match echo {
            Echo::Smooth => NOISE_SMOOTH,
            Echo::Coarse => NOISE_COARSE,
        };
        // A quadrant holds n/grain² independent speckle cells, so its mean
        // has std sigma·grain/√n; 3σ of that statistic bounds the deviation.
        let n = (IMAGE_SIZE * IMAGE_SIZE / 4) as S;
        let bound = 3.0 * sigma * echo.grain() as S / n.sqrt() + 1e-3;
        for q in [
            Quadrant::UpperOuter,
            Quadrant::UpperInner,
            Quadrant::LowerOuter,
            Quadrant::LowerInner,
        ] {
            let dev = (quadrant_mean(&a, q) - global).abs();
            assert!(dev < bound, "{echo:?} {q:?} deviates {dev} > {bound}");
        }
    }
}

#[test]
fn report_template_mentions_the_findings() {
    let pos = scene(Organ::Breast, Echo::Coarse, Some((Quadrant::LowerInner, 12)));
    let report = render_report(&pos);
    assert!(report.contains("hypoechoic nodule"), "{report}");
    assert!(report.contains("lower-inner"), "{report}");
    assert!(report.contains("12"), "{report}");

    let neg = scene(Organ::Thyroid, Echo::Smooth, None);
    let report = render_report(&neg);
    assert!(report.contains("no obvious nodule"), "{report}");
}

#[test]
fn reports_differing_only_in_size_differ_only_in_the_numeral() {
    let a = render_report(&scene(Organ::Breast, Echo::Smooth, Some((Quadrant::UpperInner, 4))));
    let b = render_report(&scene(Organ::Breast, Echo::Smooth, Some((Quadrant::UpperInner, 17))));
    let wa: Vec<&str> = a.split_whitespace().collect();
    let wb: Vec<&str> = b.split_whitespace().collect();
    assert_eq!(wa.len(), wb.len());
    let diffs: Vec<(&&str, &&str)> = wa.iter().zip(&wb).filter(|(x, y)| x != y).collect();
    assert_eq!(diffs.len(), 1);
    assert_eq!((*diffs[0].0, *diffs[0].1), ("4", "17"));
    assert_eq!(mask_sizes(&a), mask_sizes(&b));
}

#[test]
fn qa_derivation_counts_and_contents() {
    let pos = scene(Organ::Breast, Echo::Smooth, Some((Quadrant::UpperOuter, 8)));
    let report = render_report(&pos);
    let qa = derive_qa(&pos, &report).unwrap();
    let count = |g| qa.iter().filter(|p| p.granularity == g).count();
    assert_eq!(count(Granularity::Coarse), 1);
    assert_eq!(count(Granularity::Medium), 2);
    assert_eq!(count(Granularity::Fine), 3);
    assert!(qa.len() >= 5);

    let neg = scene(Organ::Thyroid, Echo::Coarse, None);
    let report = render_report(&neg);
    let qa = derive_qa(&neg, &report).unwrap();
    let fine: Vec<_> = qa.iter().filter(|p| p.granularity == Granularity::Fine).collect();
    assert_eq!(fine.len(), 1);
    assert!(fine[0].question.contains("is there a nodule"));
    assert_eq!(fine[0].answer, "no");

    // Answers never carry raw digits; sizes are always the [size] token.
    for p in derive_qa(&pos, &render_report(&pos)).unwrap() {
        assert!(
            !p.answer.split_whitespace().any(|t| t.chars().all(|c| c.is_ascii_digit())),
            "digit leaked into answer {:?}",
            p.answer
        );
    }
}

#[test]
fn coarse_answer_is_the_size_masked_report() {
    let s = scene(Organ::Breast, Echo::Smooth, Some((Quadrant::LowerOuter, 15)));
    let report = render_report(&s);
    let qa = derive_qa(&s, &report).unwrap();
    let coarse = qa.iter().find(|p| p.granularity == Granularity::Coarse).unwrap();
    assert_eq!(coarse.answer, mask_sizes(&report));
    assert!(coarse.answer.contains("[size]"));
}

#[test]
fn vocabulary_round_trips_and_reserves_specials() {
    let ds = build_dataset(3, 12).unwrap();
    let v = &ds.vocab;
    assert_eq!(v.id_of("[PAD]"), Some(PAD));
    assert_eq!(v.id_of("[CLS]"), Some(CLS));
    assert_eq!(v.id_of("[SEP]"), Some(SEP));
    assert_eq!(v.id_of("[EOS]"), Some(EOS));
    assert_eq!(v.id_of("[size]"), Some(SIZE_TOK));
    for e in &ds.entries {
        let ids = v.tokenize(&e.report).unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), e.report);
    }
    let corpus: Vec<String> = ds.entries.iter().map(|e| e.report.clone()).collect();
    let v2 = Vocabulary::build(corpus.iter().map(|s| s.as_str())).unwrap();
    let v3 = Vocabulary::build(corpus.iter().map(|s| s.as_str())).unwrap();
    assert_eq!(v2.len(), v3.len());
    for id in 0..v2.len() {
        assert_eq!(v2.detokenize(&[id]).unwrap(), v3.detokenize(&[id]).unwrap());
    }
    assert!(v.tokenize("totally-unknown-token").is_err());
}

#[test]
fn dataset_save_load_round_trip_is_exact() {
    let dir = tempdir().unwrap();
    let ds = build_dataset(7, 6).unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    // 2 image files per scene.
    let qvt_files = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "qvt")
        })
        .count();
    assert_eq!(qvt_files, 12);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.entries.len(), ds.entries.len());
    for (a, b) in back.entries.iter().zip(&ds.entries) {
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.report, b.report);
        assert_eq!(a.qa, b.qa);
        assert_eq!(a.images[0], b.images[0]);
        assert_eq!(a.images[1], b.images[1]);
    }
    assert_eq!(back.vocab.len(), ds.vocab.len());
}

#[test]
fn jsonl_lines_expose_labels_and_image_files() {
    let dir = tempdir().unwrap();
    let ds = build_dataset(1, 5).unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let text = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let ids: BTreeSet<u64> = lines
        .iter()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v["labels"]["nodule_present"].is_boolean());
            assert_eq!(v["images"].as_array().unwrap().len(), 2);
            assert!(v["qa"].as_array().unwrap().len() >= 2);
            v["id"].as_u64().unwrap()
        })
        .collect();
    assert_eq!(ids.len(), 5);
}

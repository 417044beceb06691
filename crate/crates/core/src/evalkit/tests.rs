use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::*;
use crate::autodiff::Tensor;
use crate::data::{generate_synthetic, ClassInfo, LabelTaxonomy, PromptSet};
use crate::nets::ModelConfig;
use crate::rng;
use crate::trainer::build_model;

fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut twice_wins, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !pos[i] {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if !pos[j] {
                twice_wins += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice_wins as f64 / (2 * p * n) as f64
}

#[test]
fn auc_examples() {
    assert_eq!(auc_ovr(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(auc_ovr(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
    assert_eq!(auc_ovr(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert!(matches!(auc_ovr(&[0.1, 0.2], &[true, true]), Err(EvalError::UndefinedMetric(_))));
    assert!(matches!(auc_ovr(&[0.1, 0.2], &[false, false]), Err(EvalError::UndefinedMetric(_))));
    assert!(matches!(auc_ovr(&[0.1], &[true, false]), Err(EvalError::Contract(_))));
    assert!(matches!(auc_ovr(&[f64::NAN, 0.2], &[true, false]), Err(EvalError::Contract(_))));
}

#[test]
fn auc_matches_brute_force_exactly() {
    let mut r = rng::seeded(11);
    let mut done = 0;
    while done < 100 {
        let n = r.random_range(2..60);
        // coarse scores so ties are common
        let levels = r.random_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 * 0.37 - 1.0).collect();
        let pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        if pos.iter().all(|&b| b) || pos.iter().all(|&b| !b) {
            continue;
        }
        assert_eq!(auc_ovr(&scores, &pos).unwrap(), brute_auc(&scores, &pos), "instance {done}");
        done += 1;
    }
}

#[test]
fn f1_examples() {
    assert_eq!(f1_macro(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap().macro_f1, 1.0);
    let r = f1_macro(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
    assert_eq!(r.per_class, vec![2.0 / 3.0, 0.0]);
    assert_eq!(r.macro_f1, (2.0 / 3.0 + 0.0) / 2.0);
    assert_eq!(r.flagged, vec![false, false]);
    let r = f1_macro(&[0, 1], &[0, 1], 3).unwrap();
    assert_eq!(r.flagged, vec![false, false, true]);
    assert_eq!(r.macro_f1, 2.0 / 3.0);
    assert!(f1_macro(&[], &[], 2).is_err());
    assert!(f1_macro(&[3], &[0], 2).is_err());
}

/// Confusion matrix first, then precision and recall per class.
fn hand_f1(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut cm = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let mut total = 0.0;
    for c in 0..k {
        let tp = cm[c][c];
        let predicted: u64 = (0..k).map(|t| cm[t][c]).sum();
        let actual: u64 = cm[c].iter().sum();
        // F1 = 2PR/(P+R) = 2tp / (predicted + actual)
        if predicted + actual > 0 {
            total += (2 * tp) as f64 / (predicted + actual) as f64;
        }
    }
    total / k as f64
}

#[test]
fn f1_matches_confusion_matrix_on_random_instances() {
    let mut r = rng::seeded(5);
    for _ in 0..20 {
        let k = r.random_range(2..7);
        let n = r.random_range(1..40);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        assert_eq!(f1_macro(&pred, &truth, k).unwrap().macro_f1, hand_f1(&pred, &truth, k));
    }
}

#[test]
fn f1_invariant_under_relabeling() {
    let mut r = rng::seeded(6);
    let k = 5;
    let pred: Vec<usize> = (0..50).map(|_| r.random_range(0..k)).collect();
    let truth: Vec<usize> = (0..50).map(|_| r.random_range(0..k)).collect();
    let base = f1_macro(&pred, &truth, k).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let rel = f1_macro(
        &pred.iter().map(|&c| perm[c]).collect::<Vec<_>>(),
        &truth.iter().map(|&c| perm[c]).collect::<Vec<_>>(),
        k,
    )
    .unwrap();
    for c in 0..k {
        assert_eq!(rel.per_class[perm[c]], base.per_class[c]);
    }
    assert!((rel.macro_f1 - base.macro_f1).abs() < 1e-15);
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transform(
        scores in prop::collection::vec(-3.0f64..3.0, 4..40),
        seed in any::<u64>(),
    ) {
        let mut r = rng::seeded(seed);
        let mut pos: Vec<bool> = scores.iter().map(|_| r.random_bool(0.5)).collect();
        pos[0] = true;
        pos[1] = false;
        let a = auc_ovr(&scores, &pos).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 5.0).collect();
        prop_assert_eq!(a, auc_ovr(&t, &pos).unwrap());
        let t: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(a, auc_ovr(&t, &pos).unwrap());
    }

    #[test]
    fn auc_flips_under_negation(scores in prop::collection::vec(-3.0f64..3.0, 4..40)) {
        let pos: Vec<bool> = (0..scores.len()).map(|i| i % 3 == 0).collect();
        let a = auc_ovr(&scores, &pos).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + auc_ovr(&neg, &pos).unwrap() - 1.0).abs() < 1e-12);
    }
}

fn taxonomy(k: usize) -> LabelTaxonomy {
    LabelTaxonomy::custom(
        "t",
        (0..k)
            .map(|i| ClassInfo {
                code: format!("C{i}"),
                display_name: format!("class {i}"),
            })
            .collect(),
    )
    .unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

#[test]
fn separated_embeddings_score_perfectly() {
    let u = [0.6, -0.8, 0.0];
    let prompts = Tensor::new(vec![2, 3], [u, u.map(|v| -v)].concat()).unwrap();
    let labels = vec![0, 1, 1, 0, 1, 0];
    let recs: Vec<f64> = labels.iter().flat_map(|&l| u.map(|v| if l == 0 { v } else { -v })).collect();
    let recs = Tensor::new(vec![6, 3], recs).unwrap();
    let r = zero_shot_from_embeddings(&ids(6), &labels, &recs, &prompts, &taxonomy(2)).unwrap();
    for c in &r.per_class {
        assert_eq!((c.auc, c.acc, c.f1), (Some(1.0), Some(1.0), Some(1.0)));
    }
    assert_eq!(r.average.acc, Some(1.0));
    assert!(r.predictions.iter().all(|p| p.predicted == p.label && p.scores.len() == 2));
}

#[test]
fn identical_embeddings_predict_class_zero() {
    let prompts = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    // equidistant from prompts 0 and 1
    let recs = Tensor::new(vec![6, 2], [0.5, 0.5].repeat(6)).unwrap();
    let labels = vec![0, 1, 2, 0, 1, 2];
    let r = zero_shot_from_embeddings(&ids(6), &labels, &recs, &prompts, &taxonomy(3)).unwrap();
    assert!(r.predictions.iter().all(|p| p.predicted == 0));
    let acc: Vec<_> = r.per_class.iter().map(|c| c.acc).collect();
    assert_eq!(acc, vec![Some(1.0), Some(0.0), Some(0.0)]);
}

#[test]
fn absent_class_is_undefined_and_excluded() {
    let prompts = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
    let recs = Tensor::new(vec![4, 2], vec![1.0, 0.1, 0.9, 0.0, 0.1, 1.0, 0.0, 0.8]).unwrap();
    let labels = vec![0, 0, 1, 1];
    let r = zero_shot_from_embeddings(&ids(4), &labels, &recs, &prompts, &taxonomy(3)).unwrap();
    let c2 = &r.per_class[2];
    assert_eq!((c2.support, c2.auc, c2.acc, c2.f1), (0, None, None, None));
    assert_eq!(r.average.acc, Some(1.0));
    assert_eq!(r.average.f1, Some(1.0));
    let table = r.table("t");
    assert!(table.lines().any(|l| l.starts_with("C2") && l.contains("n/a")));
    assert!(table.lines().last().unwrap().starts_with("Average"));
    assert_eq!(table.lines().count(), 1 + 1 + 3 + 1);
}

#[test]
fn zero_shot_errors() {
    let t = taxonomy(2);
    let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(matches!(zero_shot_from_embeddings(&[], &[], &p, &p, &t), Err(EvalError::Contract(_))));
    let one = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!(zero_shot_from_embeddings(&ids(1), &[2], &one, &p, &t).is_err());
    let zero = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    assert!(zero_shot_from_embeddings(&ids(1), &[0], &zero, &p, &t).is_err());
    let wide = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    assert!(zero_shot_from_embeddings(&ids(1), &[0], &wide, &p, &t).is_err());
}

proptest! {
    #[test]
    fn zero_shot_argmax_invariant_under_rescaling(seed in any::<u64>(), scales in prop::collection::vec(0.001f64..1000.0, 12)) {
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (n, k, d) = (8, 4, 6);
        let recs: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut r)).collect();
        let prompts: Vec<f64> = (0..k * d).map(|_| normal.sample(&mut r)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let t = taxonomy(k);
        let base = zero_shot_from_embeddings(
            &ids(n), &labels,
            &Tensor::new(vec![n, d], recs.clone()).unwrap(),
            &Tensor::new(vec![k, d], prompts.clone()).unwrap(), &t).unwrap();
        let rs: Vec<f64> = recs.iter().enumerate().map(|(i, v)| v * scales[i / d]).collect();
        let ps: Vec<f64> = prompts.iter().enumerate().map(|(i, v)| v * scales[n + i / d]).collect();
        let scaled = zero_shot_from_embeddings(
            &ids(n), &labels,
            &Tensor::new(vec![n, d], rs).unwrap(),
            &Tensor::new(vec![k, d], ps).unwrap(), &t).unwrap();
        let a: Vec<usize> = base.predictions.iter().map(|p| p.predicted).collect();
        let b: Vec<usize> = scaled.predictions.iter().map(|p| p.predicted).collect();
        prop_assert_eq!(a, b);
    }
}

fn blobs(n: usize, f: usize, sep: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        labels.push(y);
        for j in 0..f {
            let centre = if j == 0 { if y == 0 { -sep } else { sep } } else { 0.0 };
            data.push(100.0 + 7.0 * (centre + normal.sample(&mut r)));
        }
    }
    (Tensor::new(vec![n, f], data).unwrap(), labels)
}

#[test]
fn probe_separates_gaussian_blobs() {
    let (tx, ty) = blobs(200, 8, 3.0, 1);
    let (vx, vy) = blobs(100, 8, 3.0, 2);
    let r = linear_probe_on_features(&tx, &ty, &vx, &vy, 2, &ProbeConfig::default()).unwrap();
    assert!(r.auc > 0.99, "auc {}", r.auc);
    assert!(r.f1 > 0.95, "f1 {}", r.f1);
    assert_eq!(r.weights.shape(), &[8, 2]);
}

#[test]
fn probe_without_training_is_chance() {
    // uninformative features, so the untouched random classifier scores near 0.5
    let mut aucs = Vec::new();
    for seed in 0..10 {
        let (tx, ty) = blobs(64, 8, 0.0, 100 + seed);
        let (vx, vy) = blobs(400, 8, 0.0, 200 + seed);
        let cfg = ProbeConfig {
            epochs: 0,
            seed,
            ..ProbeConfig::default()
        };
        let r = linear_probe_on_features(&tx, &ty, &vx, &vy, 2, &cfg).unwrap();
        aucs.push(r.auc);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() < 0.1, "{aucs:?}");
}

#[test]
fn probe_with_zero_epochs_keeps_initial_weights() {
    let (tx, ty) = blobs(40, 4, 1.0, 3);
    let cfg = ProbeConfig {
        epochs: 0,
        ..ProbeConfig::default()
    };
    let a = linear_probe_on_features(&tx, &ty, &tx, &ty, 2, &cfg).unwrap();
    let mut store = crate::autodiff::ParamStore::<f64>::new();
    let head = crate::nets::Affine::new(&mut store, &mut rng::stream(0, &[0x4146]), "probe", 4, 2);
    assert_eq!(&a.weights, store.value(head.weight));
    let trained = linear_probe_on_features(&tx, &ty, &tx, &ty, 2, &ProbeConfig { epochs: 1, ..cfg }).unwrap();
    assert_ne!(a.weights, trained.weights);
}

#[test]
fn probe_contract_errors() {
    let (tx, ty) = blobs(10, 3, 1.0, 4);
    let cfg = ProbeConfig::default();
    assert!(linear_probe_on_features(&tx, &ty[..9], &tx, &ty, 2, &cfg).is_err());
    assert!(linear_probe_on_features(&tx, &ty, &tx, &ty, 1, &cfg).is_err());
    let bad = ProbeConfig { lr: 0.0, ..cfg };
    assert!(linear_probe_on_features(&tx, &ty, &tx, &ty, 2, &bad).is_err());
}

fn corpus(n: usize, k: usize, seed: u64) -> (Vec<crate::data::EcgRecord>, LabelTaxonomy) {
    let t = LabelTaxonomy::custom("four", LabelTaxonomy::ptbxl5().classes[..k].to_vec()).unwrap();
    (generate_synthetic(n, &t, 512, seed).unwrap(), t)
}

#[test]
fn model_probe_leaves_encoder_untouched_and_is_deterministic() {
    let (recs, t) = corpus(48, 4, 3);
    let model = build_model(ModelConfig::desk(0), &recs, 9).unwrap();
    let digest = model.params.digest("");
    let cfg = ProbeConfig {
        epochs: 3,
        ..ProbeConfig::default()
    };
    let a = linear_probe(&model, &recs[..32], &recs[32..], t.len(), &cfg).unwrap();
    let b = linear_probe(&model, &recs[..32], &recs[32..], t.len(), &cfg).unwrap();
    assert_eq!(model.params.digest(""), digest);
    assert_eq!(a.encoder_digest, digest);
    assert_eq!(a, b);
    assert_eq!(a.weights.shape(), &[64, 4]);

    let mut unlabeled = recs[..32].to_vec();
    unlabeled[5].label = None;
    assert!(matches!(linear_probe(&model, &unlabeled, &recs[32..], 4, &cfg), Err(EvalError::Contract(_))));
}

#[test]
fn model_zero_shot_is_deterministic() {
    let (recs, t) = corpus(40, 4, 4);
    let model = build_model(ModelConfig::desk(0), &recs, 2).unwrap();
    let prompts = PromptSet::default_for(t);
    let a = zero_shot_classify(&model, &prompts, &recs, None).unwrap();
    let b = zero_shot_classify(&model, &prompts, &recs, None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.per_class.len(), 4);
    assert!(a.predictions.iter().all(|p| p.scores.len() == 4));
    assert!(zero_shot_classify(&model, &prompts, &[], None).is_err());
}

#[test]
fn encoding_does_not_depend_on_batch_grouping() {
    let (recs, _) = corpus(70, 4, 5);
    let model = build_model(ModelConfig::desk(0), &recs, 1).unwrap();
    let all = encode_ecg(&model, &recs, Stage::Embedding).unwrap();
    let one = encode_ecg(&model, &recs[65..66], Stage::Embedding).unwrap();
    assert_eq!(all.row(65), one.row(0));
}

#[test]
fn random_init_zero_shot_is_near_chance() {
    let (recs, t) = corpus(80, 4, 6);
    let prompts = PromptSet::default_for(t);
    let mut accs = Vec::new();
    for seed in 0..10 {
        let model = build_model(ModelConfig::desk(0), &recs, 1000 + seed).unwrap();
        accs.push(zero_shot_classify(&model, &prompts, &recs, None).unwrap().average.acc.unwrap());
    }
    let mean = accs.iter().sum::<f64>() / 10.0;
    assert!((mean - 0.25).abs() <= 0.15, "{accs:?}");
}

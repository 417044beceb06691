use super::*;
use crate::autodiff::{ParamStore, Tensor};
use crate::data::{generate_synthetic, LabelTaxonomy};

/// Textbook scalar Adam with L2 folded into the gradient.
fn reference_adam(mut w: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g0) in grads.iter().enumerate() {
        let g = g0 + wd * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let t = (t + 1) as i32;
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    w
}

fn scalar_store(w: f64) -> (ParamStore<f64>, crate::autodiff::ParamId) {
    let mut s = ParamStore::new();
    let id = s.add_weight("w", Tensor::new(vec![1], vec![w]).unwrap());
    (s, id)
}

fn set_grad(s: &mut ParamStore<f64>, id: crate::autodiff::ParamId, g: f64) {
    s.get_mut(id).grad = Some(Tensor::new(vec![1], vec![g]).unwrap());
}

#[test]
fn zero_gradient_leaves_parameters() {
    let (mut s, id) = scalar_store(0.75);
    let mut st = AdamState::new();
    for _ in 0..3 {
        set_grad(&mut s, id, 0.0);
        adam_step(&mut s, &mut st, &AdamConfig::new(1e-2, 0.0)).unwrap();
    }
    assert_eq!(s.value(id).data()[0], 0.75);
}

#[test]
fn scalar_adam_matches_reference() {
    for (g, wd) in [(0.3, 0.0), (-2.0, 0.0), (0.05, 1e-2)] {
        let (mut s, id) = scalar_store(1.5);
        let mut st = AdamState::new();
        let cfg = AdamConfig::new(2e-3, wd);
        for step in 1..=10 {
            set_grad(&mut s, id, g);
            adam_step(&mut s, &mut st, &cfg).unwrap();
            let want = reference_adam(1.5, &vec![g; step], 2e-3, wd);
            assert!((s.value(id).data()[0] - want).abs() < 1e-15, "g={g} step={step}");
        }
    }
}

#[test]
fn first_step_closed_form() {
    let g = 0.3;
    let (mut s, id) = scalar_store(0.0);
    let mut st = AdamState::new();
    set_grad(&mut s, id, g);
    adam_step(&mut s, &mut st, &AdamConfig::new(2e-3, 0.0)).unwrap();
    let want = -2e-3 * g / (g.abs() + 1e-8);
    assert!((s.value(id).data()[0] - want).abs() < 1e-15);
}

#[test]
fn nan_gradient_aborts_without_change() {
    let (mut s, id) = scalar_store(1.0);
    let mut st = AdamState::new();
    set_grad(&mut s, id, 0.5);
    adam_step(&mut s, &mut st, &AdamConfig::new(1e-2, 0.0)).unwrap();
    let before = (s.value(id).clone(), st.clone());
    set_grad(&mut s, id, f64::NAN);
    assert!(matches!(adam_step(&mut s, &mut st, &AdamConfig::new(1e-2, 0.0)), Err(TrainError::Diverged(_))));
    assert_eq!(s.value(id), &before.0);
    assert_eq!(st, before.1);
}

#[test]
fn frozen_and_buffer_entries_skipped() {
    let mut s = ParamStore::<f64>::new();
    let w = s.add_weight("w", Tensor::new(vec![1], vec![1.0]).unwrap());
    let b = s.add_buffer("b", Tensor::new(vec![1], vec![1.0]).unwrap());
    s.set_requires_grad(w, false);
    for id in [w, b] {
        s.get_mut(id).grad = Some(Tensor::new(vec![1], vec![1.0]).unwrap());
    }
    let mut st = AdamState::new();
    adam_step(&mut s, &mut st, &AdamConfig::new(0.1, 0.0)).unwrap();
    assert_eq!(s.value(w).data()[0], 1.0);
    assert_eq!(s.value(b).data()[0], 1.0);
}

fn corpus(n: usize, seed: u64) -> Vec<EcgRecord> {
    generate_synthetic(n, &LabelTaxonomy::ptbxl5(), 256, seed).unwrap()
}

fn quick(objective: Objective, epochs: usize) -> TrainConfig {
    TrainConfig {
        objective,
        epochs,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    }
}

fn fresh(objective: Objective, epochs: usize, records: &[EcgRecord]) -> TrainState {
    let model = build_model(ModelConfig::desk(0), records, 3).unwrap();
    TrainState::new(quick(objective, epochs), model).unwrap()
}

fn bits(state: &TrainState) -> Vec<u8> {
    encode(state)
}

#[test]
fn five_steps_are_deterministic() {
    let recs = corpus(40, 1);
    let run = || {
        let mut s = fresh(Objective::Etp, 1, &recs);
        s.run_epoch(&recs, None).unwrap();
        s
    };
    assert_eq!(bits(&run()), bits(&run()));
}

#[test]
fn checkpoint_round_trip_bitwise() {
    let recs = corpus(24, 2);
    let mut s = fresh(Objective::Etp, 1, &recs);
    s.run_epoch(&recs, None).unwrap();
    let bytes = encode(&s);
    let back = decode(&bytes).unwrap();
    assert_eq!(encode(&back), bytes);
    assert_eq!(back.epochs_done, 1);
    assert_eq!(back.adam, s.adam);
    for ((_, a), (_, b)) in s.model.params.iter().zip(back.model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(
            a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.requires_grad, b.requires_grad);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.etpc");
    save_checkpoint(&s, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(encode(&load_checkpoint(&path).unwrap()), bytes);
}

#[test]
fn checkpoint_load_errors_are_distinct() {
    let recs = corpus(8, 2);
    let s = fresh(Objective::Etp, 1, &recs);
    let bytes = encode(&s);
    for cut in [8, 12, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
    assert!(matches!(decode(b"ET"), Err(CheckpointError::BadMagic)));
    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode(&newer),
        Err(CheckpointError::Version { found, .. }) if found == VERSION + 1
    ));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode(&trailing), Err(CheckpointError::Corrupt(_))));
}

#[test]
fn resume_matches_uninterrupted() {
    let recs = corpus(32, 4);
    for objective in [Objective::Etp, Objective::Ssl] {
        let mut straight = fresh(objective, 3, &recs);
        straight.train(&recs, None, |_, _| Ok(())).unwrap();

        let mut first = fresh(objective, 3, &recs);
        first.run_epoch(&recs, None).unwrap();
        let mut resumed = decode(&encode(&first)).unwrap();
        resumed.train(&recs, None, |_, _| Ok(())).unwrap();
        assert_eq!(bits(&resumed), bits(&straight), "{objective:?}");
    }
}

#[test]
fn initial_loss_near_ln_batch() {
    let recs = generate_synthetic(160, &LabelTaxonomy::ptbxl5(), 512, 5).unwrap();
    for objective in [Objective::Etp, Objective::Ssl] {
        let mut excess = Vec::new();
        for seed in 0..5u64 {
            let model = build_model(ModelConfig::desk(0), &recs, seed).unwrap();
            let cfg = TrainConfig { batch_size: 32, seed, ..quick(objective, 1) };
            let mut s = TrainState::new(cfg, model).unwrap();
            let g = Graph::new();
            let batch: Vec<&EcgRecord> = recs[seed as usize * 32..][..32].iter().collect();
            let loss = s.batch_loss(&g, 0, 0, &batch, None).unwrap();
            excess.push(g.value(loss).item().unwrap() as f64 - 32f64.ln());
        }
        let mean = excess.iter().sum::<f64>() / excess.len() as f64;
        assert!(mean.abs() < 0.3, "{objective:?}: {excess:?}");
    }
}

#[test]
fn ssl_leaves_text_side_untouched() {
    let recs = corpus(32, 6);
    let mut s = fresh(Objective::Ssl, 2, &recs);
    let text = s.model.params.digest("text");
    let ecg = s.model.params.digest("ecg.");
    s.train(&recs, None, |_, _| Ok(())).unwrap();
    assert_eq!(s.model.params.digest("text"), text);
    assert_ne!(s.model.params.digest("ecg."), ecg);
}

#[test]
fn frozen_text_table_unchanged_after_step() {
    let recs = corpus(16, 7);
    let mut s = fresh(Objective::Etp, 1, &recs);
    s.model.set_text_frozen(true);
    let table = s.model.params.digest("text.");
    let head = s.model.params.digest("text_head");
    s.run_epoch(&recs, None).unwrap();
    assert_eq!(s.model.params.digest("text."), table);
    assert_ne!(s.model.params.digest("text_head"), head);
}

#[test]
fn divergence_keeps_last_good_state() {
    let recs = corpus(16, 8);
    let mut s = fresh(Objective::Etp, 1, &recs);
    let id = s.model.params.id("ecg_head.weight").unwrap();
    s.model.params.get_mut(id).value.data_mut()[0] = f32::NAN;
    let before = encode(&s);
    assert!(matches!(s.run_epoch(&recs, None), Err(TrainError::Diverged(_))));
    assert_eq!(encode(&s), before);
}

#[test]
fn external_text_backbone_trains() {
    let recs = corpus(16, 9);
    let mut table = ExternalEmbeddingTable::new(6).unwrap();
    for (i, r) in recs.iter().enumerate() {
        table.insert(r.id.clone(), (0..6).map(|k| ((i * 7 + k * 3) % 11) as f32 - 5.0).collect()).unwrap();
    }
    let mut cfg = ModelConfig::desk(0);
    cfg.text_backbone = TextBackbone::External { dim: 6 };
    let model = build_model(cfg, &recs, 1).unwrap();
    let mut s = TrainState::new(quick(Objective::Etp, 1), model).unwrap();
    s.run_epoch(&recs, Some(&table)).unwrap();
    assert!(matches!(s.run_epoch(&recs, None), Err(TrainError::Config(_))));
}

#[test]
fn threads_do_not_change_results() {
    let recs = corpus(16, 10);
    let mut one = fresh(Objective::Ssl, 1, &recs);
    let mut four = fresh(Objective::Ssl, 1, &recs);
    four.threads = 4;
    one.run_epoch(&recs, None).unwrap();
    four.run_epoch(&recs, None).unwrap();
    assert_eq!(bits(&one), bits(&four));
}

#[test]
fn config_checks() {
    let recs = corpus(8, 0);
    assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    let mut s = fresh(Objective::Etp, 1, &recs);
    s.config.batch_size = 9;
    assert!(matches!(s.run_epoch(&recs, None), Err(TrainError::Config(_))));
}

#[test]
fn partial_batch_is_dropped() {
    let recs = corpus(20, 11);
    let mut s = fresh(Objective::Etp, 1, &recs);
    s.run_epoch(&recs, None).unwrap();
    assert_eq!(s.adam.step, 2);
}

#[test]
fn current_loss_changes_nothing() {
    let recs = corpus(16, 12);
    let s = fresh(Objective::Etp, 1, &recs);
    let before = encode(&s);
    let a = s.current_loss(&recs, None).unwrap();
    assert_eq!(encode(&s), before);
    assert_eq!(a, s.current_loss(&recs, None).unwrap());
    assert!(a.is_finite());
}

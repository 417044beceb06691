//! Full-size training runs on the four-class synthetic corpus.

use etp_core::data::{generate_synthetic, EcgRecord, LabelTaxonomy, PromptSet};
use etp_core::evalkit::zero_shot_classify;
use etp_core::nets::ModelConfig;
use etp_core::trainer::{build_model, Objective, TrainConfig, TrainState};

fn four_class() -> (Vec<EcgRecord>, PromptSet) {
    let tax = LabelTaxonomy::custom("four", LabelTaxonomy::ptbxl5().classes[..4].to_vec()).unwrap();
    let records = generate_synthetic(2000, &tax, 512, 13).unwrap();
    (records, PromptSet::default_for(tax))
}

fn state(objective: Objective, records: &[EcgRecord]) -> TrainState {
    let cfg = TrainConfig {
        objective,
        epochs: 20,
        batch_size: 32,
        seed: 3,
        ..TrainConfig::default()
    };
    TrainState::new(cfg, build_model(ModelConfig::desk(0), records, 3).unwrap()).unwrap()
}

#[test]
fn etp_halves_loss_and_beats_random_zero_shot() {
    let (records, prompts) = four_class();
    let mut s = state(Objective::Etp, &records);
    let random_acc = zero_shot_classify(&s.model, &prompts, &records, None).unwrap().average.acc.unwrap();
    let initial = s.current_loss(&records, None).unwrap();
    let logs = s.train(&records, None, |_, _| Ok(())).unwrap();
    let last = logs.last().unwrap().mean_loss;
    assert!(last < 0.5 * initial, "initial {initial}, final {last}");
    let acc = zero_shot_classify(&s.model, &prompts, &records, None).unwrap().average.acc.unwrap();
    assert!(acc > random_acc, "trained {acc}, random {random_acc}");
}

#[test]
fn ssl_loss_mostly_decreases() {
    let (records, _) = four_class();
    let mut s = state(Objective::Ssl, &records);
    let text = s.model.params.digest("text");
    let initial = s.current_loss(&records, None).unwrap();
    let logs = s.train(&records, None, |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = std::iter::once(initial).chain(logs.iter().map(|l| l.mean_loss)).collect();
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down >= 15, "decreased in {down} of 20 epochs: {losses:?}");
    assert_eq!(s.model.params.digest("text"), text);
}

use rand::seq::SliceRandom;
use serde::Serialize;

use super::embed::{encode_ecg, Stage};
use super::metrics::{argmax, auc_ovr, f1_macro, mean_defined};
use super::EvalError;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::data::EcgRecord;
use crate::nets::{Affine, EtpModel};
use crate::rng;
use crate::trainer::{adam_step, AdamConfig, AdamState};

const SHUFFLE_TAG: u64 = 0x5052;
const INIT_TAG: u64 = 0x4146;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-2,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || !(self.weight_decay >= 0.0) {
            return Err(EvalError::Contract(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearProbeResult {
    /// Macro one-vs-rest AUC over test logits (classes with both positives
    /// and negatives in the test split).
    pub auc: f64,
    pub f1: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub per_class_f1: Vec<f64>,
    /// `[feature_dim, num_classes]`, applied to standardized features.
    #[serde(skip)]
    pub weights: Tensor<f64>,
    #[serde(skip)]
    pub bias: Tensor<f64>,
    #[serde(skip)]
    pub feature_mean: Vec<f64>,
    #[serde(skip)]
    pub feature_std: Vec<f64>,
    pub encoder_digest: String,
}

fn labels_of(records: &[EcgRecord], what: &str) -> Result<Vec<usize>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Contract(format!("{what} split is empty")));
    }
    records
        .iter()
        .map(|r| r.label.ok_or_else(|| EvalError::Contract(format!("record {} has no label", r.id))))
        .collect()
}

/// Trains an affine softmax classifier on frozen pre-projection features.
pub fn linear_probe(
    model: &EtpModel<f32>,
    train: &[EcgRecord],
    test: &[EcgRecord],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbeResult, EvalError> {
    let train_y = labels_of(train, "train")?;
    let test_y = labels_of(test, "test")?;
    let mut frozen = model.clone();
    frozen.freeze_prefix("");
    let before = frozen.params.digest("");
    let train_x = encode_ecg(&frozen, train, Stage::Features)?;
    let test_x = encode_ecg(&frozen, test, Stage::Features)?;
    let mut result = linear_probe_on_features(&train_x, &train_y, &test_x, &test_y, num_classes, cfg)?;
    let after = frozen.params.digest("");
    if before != after || after != model.params.digest("") {
        return Err(EvalError::Contract("encoder parameters changed during the probe".into()));
    }
    result.encoder_digest = after;
    Ok(result)
}

fn standardize(train: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (train.shape()[0], train.shape()[1]);
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt().max(1e-8)).collect();
    (mean, std)
}

fn apply_standardize(x: &Tensor<f64>, mean: &[f64], std: &[f64]) -> Tensor<f64> {
    let f = mean.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % f]) / std[i % f])
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn gather(x: &Tensor<f64>, rows: &[usize]) -> Tensor<f64> {
    let f = x.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), f], data).expect("row width")
}

/// Probe on precomputed features `[N, F]`. Features are standardized with
/// the training statistics; the last partial batch of an epoch is kept.
pub fn linear_probe_on_features(
    train_x: &Tensor<f64>,
    train_y: &[usize],
    test_x: &Tensor<f64>,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbeResult, EvalError> {
    cfg.validate()?;
    if train_x.rank() != 2 || test_x.rank() != 2 || train_x.shape()[1] != test_x.shape()[1] {
        return Err(EvalError::Contract(format!(
            "feature shapes {:?} and {:?} do not match",
            train_x.shape(),
            test_x.shape()
        )));
    }
    if train_x.shape()[0] != train_y.len() || test_x.shape()[0] != test_y.len() || train_y.is_empty() || test_y.is_empty() {
        return Err(EvalError::Contract("features and labels disagree in length".into()));
    }
    if num_classes < 2 || train_y.iter().chain(test_y).any(|&c| c >= num_classes) {
        return Err(EvalError::Contract(format!("labels must lie in 0..{num_classes} with at least 2 classes")));
    }
    let f = train_x.shape()[1];
    let (mean, std) = standardize(train_x);
    let train_z = apply_standardize(train_x, &mean, &std);
    let test_z = apply_standardize(test_x, &mean, &std);

    let mut store = ParamStore::<f64>::new();
    let head = Affine::new(&mut store, &mut rng::stream(cfg.seed, &[INIT_TAG]), "probe", f, num_classes);
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE_TAG, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let g = Graph::new();
            let x = g.constant(gather(&train_z, batch));
            let logits = head.forward(&g, &store, x)?;
            let logp = g.log_softmax(logits)?;
            let picked = g.pick(logp, &labels)?;
            let loss = g.scale(g.sum_all(picked), -1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            store.zero_grad();
            store.accumulate(&grads);
            adam_step(&mut store, &mut adam, &adam_cfg).map_err(|e| EvalError::Contract(e.to_string()))?;
        }
    }

    let g = Graph::new();
    let x = g.constant(test_z);
    let logits = head.forward(&g, &store, x)?;
    let logits = g.value(logits).clone();
    let rows: Vec<&[f64]> = (0..test_y.len()).map(|i| logits.row(i)).collect();
    let pred: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    let per_class_auc: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let column: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let positives: Vec<bool> = test_y.iter().map(|&y| y == c).collect();
            auc_ovr(&column, &positives).ok()
        })
        .collect();
    let auc = mean_defined(per_class_auc.iter().copied())
        .ok_or_else(|| EvalError::UndefinedMetric("no class has both positives and negatives in the test split".into()))?;
    let f1 = f1_macro(&pred, test_y, num_classes)?;
    Ok(LinearProbeResult {
        auc,
        f1: f1.macro_f1,
        per_class_auc,
        per_class_f1: f1.per_class,
        weights: store.value(head.weight).clone(),
        bias: store.value(head.bias).clone(),
        feature_mean: mean,
        feature_std: std,
        encoder_digest: String::new(),
    })
}

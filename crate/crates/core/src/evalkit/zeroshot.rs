use serde::Serialize;

use super::embed::{encode_ecg, encode_prompts, Stage};
use super::metrics::{argmax, auc_ovr, mean_defined};
use super::EvalError;
use crate::autodiff::Tensor;
use crate::data::{EcgRecord, ExternalEmbeddingTable, LabelTaxonomy, PromptSet};
use crate::nets::EtpModel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub code: String,
    pub name: String,
    pub support: usize,
    pub auc: Option<f64>,
    /// Recall of the class under argmax prediction.
    pub acc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Averages {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotResult {
    pub per_class: Vec<ClassMetrics>,
    pub average: Averages,
    pub predictions: Vec<Prediction>,
}

fn normalize_rows(t: &Tensor<f64>, what: &str) -> Result<Vec<Vec<f64>>, EvalError> {
    if t.rank() != 2 {
        return Err(EvalError::Contract(format!("{what}: expected [N, d], got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) || !norm.is_finite() {
                return Err(EvalError::Contract(format!("{what}: row {i} cannot be normalized")));
            }
            Ok(row.iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// Scores records against class prompts by cosine similarity and predicts
/// the best match. Embeddings need not be normalized.
pub fn zero_shot_from_embeddings(
    ids: &[String],
    labels: &[usize],
    record_emb: &Tensor<f64>,
    prompt_emb: &Tensor<f64>,
    taxonomy: &LabelTaxonomy,
) -> Result<ZeroShotResult, EvalError> {
    let k = taxonomy.len();
    if ids.is_empty() {
        return Err(EvalError::Contract("zero-shot evaluation needs at least one record".into()));
    }
    if ids.len() != labels.len() || record_emb.shape()[0] != ids.len() {
        return Err(EvalError::Contract("ids, labels and embeddings disagree in length".into()));
    }
    if prompt_emb.shape()[0] != k || prompt_emb.rank() != 2 || prompt_emb.shape()[1] != record_emb.shape()[1] {
        return Err(EvalError::Contract(format!(
            "prompt embeddings {:?} do not match {k} classes and records {:?}",
            prompt_emb.shape(),
            record_emb.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(EvalError::Contract(format!("label {bad} outside taxonomy of {k} classes")));
    }
    let recs = normalize_rows(record_emb, "record embeddings")?;
    let prompts = normalize_rows(prompt_emb, "prompt embeddings")?;

    let predictions: Vec<Prediction> = recs
        .iter()
        .zip(ids)
        .zip(labels)
        .map(|((r, id), &label)| {
            let scores: Vec<f64> = prompts.iter().map(|p| r.iter().zip(p).map(|(a, b)| a * b).sum()).collect();
            Prediction {
                id: id.clone(),
                label,
                predicted: argmax(&scores),
                scores,
            }
        })
        .collect();

    let per_class: Vec<ClassMetrics> = taxonomy
        .classes
        .iter()
        .enumerate()
        .map(|(c, info)| {
            let support = labels.iter().filter(|&&l| l == c).count();
            let (mut tp, mut fp) = (0usize, 0usize);
            for p in &predictions {
                match (p.predicted == c, p.label == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    _ => {}
                }
            }
            let fn_ = support - tp;
            let defined = support > 0;
            let column: Vec<f64> = predictions.iter().map(|p| p.scores[c]).collect();
            let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            ClassMetrics {
                code: info.code.clone(),
                name: info.display_name.clone(),
                support,
                auc: auc_ovr(&column, &positives).ok(),
                acc: defined.then(|| tp as f64 / support as f64),
                f1: defined.then(|| (2 * tp) as f64 / (2 * tp + fp + fn_) as f64),
            }
        })
        .collect();

    let average = Averages {
        auc: mean_defined(per_class.iter().map(|c| c.auc)),
        acc: mean_defined(per_class.iter().map(|c| c.acc)),
        f1: mean_defined(per_class.iter().map(|c| c.f1)),
    };
    Ok(ZeroShotResult {
        per_class,
        average,
        predictions,
    })
}

/// Zero-shot classification of labelled `records` with one prompt per class.
pub fn zero_shot_classify(
    model: &EtpModel<f32>,
    prompts: &PromptSet,
    records: &[EcgRecord],
    external: Option<&ExternalEmbeddingTable>,
) -> Result<ZeroShotResult, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Contract("zero-shot evaluation needs at least one record".into()));
    }
    let labels = records
        .iter()
        .map(|r| r.label.ok_or_else(|| EvalError::Contract(format!("record {} has no label", r.id))))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let record_emb = encode_ecg(model, records, Stage::Embedding)?;
    let prompt_emb = encode_prompts(model, prompts, external)?;
    zero_shot_from_embeddings(&ids, &labels, &record_emb, &prompt_emb, &prompts.taxonomy)
}

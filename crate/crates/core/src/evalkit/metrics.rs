use super::EvalError;

/// One-vs-rest ROC AUC by the rank-sum formula, ties sharing their average
/// rank. Doubled ranks keep every intermediate an exact integer.
pub fn auc_ovr(scores: &[f64], positives: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positives.len() {
        return Err(EvalError::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let p = positives.iter().filter(|&&b| b).count() as u64;
    let n = positives.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(EvalError::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Contract("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i..j hold 1-based ranks i+1..=j; twice their mean is i+1+j
        let twice_avg = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| positives[k]).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j;
    }
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
    /// Classes with neither true nor predicted instances (scored 0).
    pub flagged: Vec<bool>,
}

/// Per-class `2TP / (2TP + FP + FN)` and their unweighted mean.
pub fn f1_macro(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<F1Report, EvalError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(EvalError::Contract(format!(
            "need equal, non-empty prediction and truth lists ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    if num_classes == 0 || pred.iter().chain(truth).any(|&c| c >= num_classes) {
        return Err(EvalError::Contract(format!("class id outside 0..{num_classes}")));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut flagged = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        flagged.push(denom == 0);
        per_class.push(if denom == 0 { 0.0 } else { (2 * tp[c]) as f64 / denom as f64 });
    }
    let macro_f1 = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(F1Report {
        macro_f1,
        per_class,
        flagged,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean of the defined entries, `None` when there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

//! Zero-shot classification, linear probing and the metrics behind them.

mod embed;
mod metrics;
mod probe;
mod report;
mod zeroshot;

pub use embed::{encode_ecg, encode_prompts, Stage};
pub use metrics::{argmax, auc_ovr, f1_macro, mean_defined, F1Report};
pub use probe::{linear_probe, linear_probe_on_features, LinearProbeResult, ProbeConfig};
pub use zeroshot::{zero_shot_classify, zero_shot_from_embeddings, Averages, ClassMetrics, Prediction, ZeroShotResult};

use crate::autodiff::TensorError;
use crate::data::DataError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[cfg(test)]
mod tests;

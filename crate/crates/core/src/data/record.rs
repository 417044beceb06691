use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autodiff::{Scalar, Tensor};

pub const NUM_LEADS: usize = 12;
pub const DEFAULT_FS: u32 = 500;

/// One 12-lead recording with its free-text report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub id: String,
    /// Lead-major samples in millivolts, `NUM_LEADS` rows of equal length.
    pub signal: Vec<Vec<f32>>,
    pub sampling_rate_hz: u32,
    pub report: String,
    pub label: Option<usize>,
}

impl EcgRecord {
    pub fn len(&self) -> usize {
        self.signal.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<(), DataError> {
        if self.signal.len() != NUM_LEADS {
            return Err(DataError::Schema(format!(
                "record {}: expected {NUM_LEADS} leads, found {}",
                self.id,
                self.signal.len()
            )));
        }
        let len = self.len();
        if len == 0 || self.signal.iter().any(|l| l.len() != len) {
            return Err(DataError::Schema(format!(
                "record {}: leads must be non-empty and of equal length",
                self.id
            )));
        }
        if self.signal.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataError::Schema(format!("record {}: non-finite sample", self.id)));
        }
        if let (Some(label), Some(n)) = (self.label, num_classes) {
            if label >= n {
                return Err(DataError::Schema(format!(
                    "record {}: label {label} outside taxonomy of {n} classes",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Stacks equal-length records into a `[B, leads, L]` tensor.
pub fn stack_signals<T: Scalar>(records: &[&EcgRecord]) -> Result<Tensor<T>, DataError> {
    let first = records
        .first()
        .ok_or_else(|| DataError::Config("cannot stack an empty batch".into()))?;
    let (leads, len) = (first.signal.len(), first.len());
    let mut data = Vec::with_capacity(records.len() * leads * len);
    for r in records {
        if r.signal.len() != leads || r.len() != len {
            return Err(DataError::Schema(format!(
                "record {} has shape {}x{}, batch expects {leads}x{len}",
                r.id,
                r.signal.len(),
                r.len()
            )));
        }
        for lead in &r.signal {
            data.extend(lead.iter().map(|&v| T::from_f64(v as f64)));
        }
    }
    Tensor::new(vec![records.len(), leads, len], data).map_err(|e| DataError::Schema(e.to_string()))
}

use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::{DataError, EcgRecord};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    Fractions {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
    /// Explicit id lists; records named in no list are left out.
    Explicit {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
}

pub struct Split {
    pub train: Vec<EcgRecord>,
    pub val: Vec<EcgRecord>,
    pub test: Vec<EcgRecord>,
}

pub fn split(records: &[EcgRecord], spec: &SplitSpec) -> Result<Split, DataError> {
    if records.is_empty() {
        return Err(DataError::Config("cannot split an empty record list".into()));
    }
    match spec {
        SplitSpec::Fractions { train, val, test, seed } => {
            if [*train, *val, *test].iter().any(|f| !(0.0..=1.0).contains(f)) || (train + val + test - 1.0).abs() > 1e-9 {
                return Err(DataError::Config(format!(
                    "split fractions must lie in [0,1] and sum to 1, got {train}/{val}/{test}"
                )));
            }
            let n = records.len();
            let n_train = (n as f64 * train).round() as usize;
            let n_val = ((n as f64 * val).round() as usize).min(n - n_train);
            let n_test = n - n_train - n_val;
            if n_train == 0 || n_val == 0 || n_test == 0 {
                return Err(DataError::Config(format!(
                    "split of {n} records gives an empty partition ({n_train}/{n_val}/{n_test})"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(*seed, &[0x5917]));
            let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
            Ok(Split {
                train: pick(&order[..n_train]),
                val: pick(&order[n_train..n_train + n_val]),
                test: pick(&order[n_train + n_val..]),
            })
        }
        SplitSpec::Explicit { train, val, test } => {
            let by_id: HashMap<&str, &EcgRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
            let mut seen = HashMap::new();
            let mut take = |ids: &[String], part: &'static str| -> Result<Vec<EcgRecord>, DataError> {
                ids.iter()
                    .map(|id| {
                        if let Some(prev) = seen.insert(id.clone(), part) {
                            return Err(DataError::Config(format!("id {id} listed in both {prev} and {part}")));
                        }
                        by_id
                            .get(id.as_str())
                            .map(|r| (*r).clone())
                            .ok_or_else(|| DataError::Lookup(format!("split lists unknown record id {id}")))
                    })
                    .collect()
            };
            Ok(Split {
                train: take(train, "train")?,
                val: take(val, "val")?,
                test: take(test, "test")?,
            })
        }
    }
}

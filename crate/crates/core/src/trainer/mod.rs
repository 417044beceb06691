//! Pre-training loops for the cross-modal and augmentation objectives, the
//! Adam optimizer and checkpoint persistence.

mod checkpoint;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_digest, decode, encode, load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, RngState, MAGIC, VERSION,
};
pub use optim::{adam_step, AdamConfig, AdamState, Moments};

use crate::autodiff::{BnMode, Graph, ParamKind, Scalar, Tensor, TensorError};
use crate::data::{stack_signals, DataError, EcgRecord, ExternalEmbeddingTable};
use crate::nets::{EtpModel, ModelConfig, TextBackbone, TextInput, TokenBatch, Vocabulary};
use crate::objectives::{augment_pair, cross_modal_loss, ssl_loss, AugmentationConfig, ContrastiveConfig};
use crate::rng;

const SHUFFLE_TAG: u64 = 0x5348;
const AUGMENT_TAG: u64 = 0x4147;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Etp,
    Ssl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub tau_cross: f64,
    pub tau_ssl: f64,
    pub augmentation: AugmentationConfig,
    /// Periodic checkpoint interval in epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Etp,
            epochs: 50,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-5,
            seed: 0,
            tau_cross: 0.07,
            tau_ssl: 0.07,
            augmentation: AugmentationConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau_cross: self.tau_cross,
            tau_ssl: self.tau_ssl,
            batch_size: self.batch_size,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.weight_decay)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.contrastive().validate()?;
        self.augmentation.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_clock_s: f64,
    pub lr: f64,
}

/// Everything needed to continue a run: configuration, model, optimizer and
/// the number of completed epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: EtpModel<f32>,
    pub adam: AdamState<f32>,
    pub epochs_done: usize,
    /// Worker threads for batch assembly; results do not depend on it.
    pub threads: usize,
}

/// Builds a model for `records`: a vocabulary from their reports when the
/// text side is token based.
pub fn build_model(mut config: ModelConfig, records: &[EcgRecord], seed: u64) -> Result<EtpModel<f32>, TrainError> {
    let vocab = match config.text_backbone {
        TextBackbone::Tokens => Vocabulary::build(records.iter().map(|r| r.report.as_str()), 1),
        TextBackbone::External { .. } => Vocabulary::from_tokens(Vec::new()),
    };
    config.text.vocab_size = vocab.len();
    Ok(EtpModel::new(config, vocab, seed)?)
}

fn external_batch(table: Option<&ExternalEmbeddingTable>, batch: &[&EcgRecord], dim: usize) -> Result<Tensor<f32>, TrainError> {
    let table = table.ok_or_else(|| TrainError::Config("model expects external text embeddings; none supplied".into()))?;
    if table.dim() != dim {
        return Err(TrainError::Config(format!("embedding table dim {} but model expects {dim}", table.dim())));
    }
    let mut data = Vec::with_capacity(batch.len() * dim);
    for r in batch {
        data.extend_from_slice(table.get(&r.id)?);
    }
    Ok(Tensor::new(vec![batch.len(), dim], data)?)
}

impl TrainState {
    pub fn new(config: TrainConfig, model: EtpModel<f32>) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            config,
            model,
            adam: AdamState::new(),
            epochs_done: 0,
            threads: 1,
        })
    }

    fn buffers(&self) -> Vec<(crate::autodiff::ParamId, Tensor<f32>)> {
        self.model
            .params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Buffer)
            .map(|(id, p)| (id, p.value.clone()))
            .collect()
    }

    fn batch_loss(
        &mut self,
        g: &Graph<f32>,
        epoch: usize,
        index: usize,
        batch: &[&EcgRecord],
        external: Option<&ExternalEmbeddingTable>,
    ) -> Result<crate::autodiff::Var, TrainError> {
        let cfg = self.config.contrastive();
        match self.config.objective {
            Objective::Etp => {
                let signal = g.constant(stack_signals(batch)?);
                let e = self.model.ecg_projection(g, signal, BnMode::Train)?;
                let e_hat = g.l2_normalize(e)?;
                let tokens;
                let input = match self.model.config.text_backbone {
                    TextBackbone::Tokens => {
                        let texts: Vec<&str> = batch.iter().map(|r| r.report.as_str()).collect();
                        tokens = TokenBatch::encode(&self.model.vocab, &texts);
                        TextInput::Tokens(&tokens)
                    }
                    TextBackbone::External { dim } => TextInput::External(external_batch(external, batch, dim)?),
                };
                let t = self.model.text_projection(g, input)?;
                let t_hat = g.l2_normalize(t)?;
                Ok(cross_modal_loss(g, e_hat, t_hat, &cfg)?)
            }
            Objective::Ssl => {
                let aug = &self.config.augmentation;
                let seed = self.config.seed;
                let make = |i: usize| {
                    let mut r = rng::stream(seed, &[AUGMENT_TAG, aug.seed, epoch as u64, index as u64, i as u64]);
                    augment_pair(&batch[i].signal, aug, &mut r)
                };
                let pairs = if self.threads > 1 {
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(self.threads)
                        .build()
                        .map_err(|e| TrainError::Config(e.to_string()))?;
                    pool.install(|| (0..batch.len()).into_par_iter().map(make).collect::<Result<Vec<_>, _>>())?
                } else {
                    (0..batch.len()).map(make).collect::<Result<Vec<_>, _>>()?
                };
                let view = |strong: bool| -> Result<Tensor<f32>, TrainError> {
                    let (leads, len) = (pairs[0].weak.len(), pairs[0].weak[0].len());
                    let mut data = Vec::with_capacity(pairs.len() * leads * len);
                    for p in &pairs {
                        let v = if strong { &p.strong } else { &p.weak };
                        if v.len() != leads || v.iter().any(|l| l.len() != len) {
                            return Err(TrainError::Config("records in a batch must share one shape".into()));
                        }
                        data.extend(v.iter().flatten());
                    }
                    Ok(Tensor::new(vec![pairs.len(), leads, len], data)?)
                };
                let v1 = g.constant(view(false)?);
                let v2 = g.constant(view(true)?);
                let e1 = self.model.ecg_projection(g, v1, BnMode::Train)?;
                let e2 = self.model.ecg_projection(g, v2, BnMode::Train)?;
                let (e1, e2) = (g.l2_normalize(e1)?, g.l2_normalize(e2)?);
                Ok(ssl_loss(g, e1, e2, &cfg)?)
            }
        }
    }

    /// One optimization step. On failure the parameters, buffers and
    /// optimizer state are left as they were before the call.
    fn step(
        &mut self,
        epoch: usize,
        index: usize,
        batch: &[&EcgRecord],
        external: Option<&ExternalEmbeddingTable>,
    ) -> Result<f64, TrainError> {
        let saved = self.buffers();
        let restore = |s: &mut Self| {
            for (id, v) in &saved {
                s.model.params.get_mut(*id).value = v.clone();
            }
            s.model.params.zero_grad();
        };
        let g = Graph::new();
        let result = self.batch_loss(&g, epoch, index, batch, external).and_then(|loss| {
            let value = g.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(TrainError::Diverged(format!("non-finite loss at epoch {} batch {index}", epoch + 1)));
            }
            let grads = g.backward(loss)?;
            if !grads.all_finite() {
                return Err(TrainError::Diverged(format!(
                    "non-finite gradient at epoch {} batch {index}",
                    epoch + 1
                )));
            }
            Ok((value, grads))
        });
        let (value, grads) = match result {
            Ok(v) => v,
            Err(e) => {
                restore(self);
                return Err(match e {
                    TrainError::Tensor(TensorError::Domain(msg)) => {
                        TrainError::Diverged(format!("{msg} at epoch {} batch {index}", epoch + 1))
                    }
                    other => other,
                });
            }
        };
        self.model.params.accumulate(&grads);
        if let Err(e) = adam_step(&mut self.model.params, &mut self.adam, &self.config.adam()) {
            restore(self);
            return Err(e);
        }
        self.model.params.zero_grad();
        Ok(value)
    }

    /// Record indices of each full batch of the next epoch.
    fn schedule(&self, n: usize) -> Result<Vec<Vec<usize>>, TrainError> {
        let bs = self.config.batch_size;
        if n < bs {
            return Err(TrainError::Config(format!("corpus of {n} records is smaller than batch_size {bs}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[SHUFFLE_TAG, self.epochs_done as u64]));
        Ok(order.chunks_exact(bs).map(<[usize]>::to_vec).collect())
    }

    /// Runs the next epoch: seeded shuffle, full batches only.
    pub fn run_epoch(&mut self, records: &[EcgRecord], external: Option<&ExternalEmbeddingTable>) -> Result<EpochLog, TrainError> {
        let start = Instant::now();
        let epoch = self.epochs_done;
        let batches = self.schedule(records.len())?;
        let mut total = 0.0;
        for (k, idx) in batches.iter().enumerate() {
            let batch: Vec<&EcgRecord> = idx.iter().map(|&i| &records[i]).collect();
            total += self.step(epoch, k, &batch, external)?;
        }
        self.epochs_done += 1;
        Ok(EpochLog {
            epoch: self.epochs_done,
            mean_loss: total / batches.len() as f64,
            wall_clock_s: start.elapsed().as_secs_f64(),
            lr: self.config.lr,
        })
    }

    /// Mean training loss over the batches of the next epoch at the current
    /// parameters. Nothing in `self` changes.
    pub fn current_loss(&self, records: &[EcgRecord], external: Option<&ExternalEmbeddingTable>) -> Result<f64, TrainError> {
        let mut work = self.clone();
        let epoch = self.epochs_done;
        let batches = self.schedule(records.len())?;
        let mut total = 0.0;
        for (k, idx) in batches.iter().enumerate() {
            let batch: Vec<&EcgRecord> = idx.iter().map(|&i| &records[i]).collect();
            let g = Graph::new();
            let loss = work.batch_loss(&g, epoch, k, &batch, external)?;
            total += g.value(loss).item()?.as_f64();
        }
        Ok(total / batches.len() as f64)
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn train(
        &mut self,
        records: &[EcgRecord],
        external: Option<&ExternalEmbeddingTable>,
        mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<(), TrainError>,
    ) -> Result<Vec<EpochLog>, TrainError> {
        if records.iter().any(|r| r.report.trim().is_empty()) && self.config.objective == Objective::Etp {
            return Err(TrainError::Config("cross-modal training needs a report for every record".into()));
        }
        let mut logs = Vec::new();
        while self.epochs_done < self.config.epochs {
            let log = self.run_epoch(records, external)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

fn pretrain(
    objective: Objective,
    mut config: TrainConfig,
    model_config: ModelConfig,
    records: &[EcgRecord],
    external: Option<&ExternalEmbeddingTable>,
    on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<(), TrainError>,
) -> Result<(TrainState, Vec<EpochLog>), TrainError> {
    config.objective = objective;
    let model = build_model(model_config, records, config.seed)?;
    let mut state = TrainState::new(config, model)?;
    let logs = state.train(records, external, on_epoch)?;
    Ok((state, logs))
}

/// Cross-modal pre-training from a fresh seeded model.
pub fn pretrain_etp(
    config: TrainConfig,
    model_config: ModelConfig,
    records: &[EcgRecord],
    external: Option<&ExternalEmbeddingTable>,
    on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<(), TrainError>,
) -> Result<(TrainState, Vec<EpochLog>), TrainError> {
    pretrain(Objective::Etp, config, model_config, records, external, on_epoch)
}

/// Augmentation-based pre-training of the ECG path only.
pub fn pretrain_ssl(
    config: TrainConfig,
    model_config: ModelConfig,
    records: &[EcgRecord],
    on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<(), TrainError>,
) -> Result<(TrainState, Vec<EpochLog>), TrainError> {
    pretrain(Objective::Ssl, config, model_config, records, None, on_epoch)
}

#[cfg(test)]
mod tests;

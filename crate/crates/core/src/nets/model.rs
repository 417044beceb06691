use serde::{Deserialize, Serialize};

use super::{EcgEncoder, EcgEncoderConfig, ProjectionHead, TextEncoder, TextEncoderConfig, TokenBatch, Vocabulary};
use crate::autodiff::{BnMode, Graph, ParamKind, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::rng;

/// Where text features come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextBackbone {
    /// Trainable token encoder over the model vocabulary.
    Tokens,
    /// Precomputed vectors of the given width, supplied per batch.
    External { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ecg: EcgEncoderConfig,
    pub text: TextEncoderConfig,
    pub text_backbone: TextBackbone,
    /// Shared embedding width `d`.
    pub proj_dim: usize,
    /// Hidden width of the optional relu projection MLP.
    pub proj_hidden: Option<usize>,
}

impl ModelConfig {
    pub const DESK_PROJ_DIM: usize = 32;
    pub const PAPER_PROJ_DIM: usize = 512;
    pub const DESK_EMBED_DIM: usize = 64;

    /// Tiny encoder with a token text encoder sized for `vocab`.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            ecg: EcgEncoderConfig::tiny(),
            text: TextEncoderConfig {
                vocab_size,
                embed_dim: Self::DESK_EMBED_DIM,
                frozen: false,
            },
            text_backbone: TextBackbone::Tokens,
            proj_dim: Self::DESK_PROJ_DIM,
            proj_hidden: None,
        }
    }

    pub fn text_feature_dim(&self) -> usize {
        match self.text_backbone {
            TextBackbone::Tokens => self.text.feature_dim(),
            TextBackbone::External { dim } => dim,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.ecg.validate().map_err(TensorError::Contract)?;
        if self.text_backbone == TextBackbone::Tokens {
            self.text.validate().map_err(TensorError::Contract)?;
        }
        if self.proj_dim == 0 || self.proj_hidden == Some(0) || self.text_feature_dim() == 0 {
            return Err(TensorError::Contract("projection and feature widths must be positive".into()));
        }
        Ok(())
    }
}

/// Text input for one batch.
pub enum TextInput<'a, T> {
    Tokens(&'a TokenBatch),
    /// `[B, dim]` precomputed features.
    External(Tensor<T>),
}

/// ECG encoder, text encoder and both projection heads over one parameter
/// store.
#[derive(Clone, Debug)]
pub struct EtpModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    pub ecg: EcgEncoder,
    pub text: Option<TextEncoder>,
    pub ecg_head: ProjectionHead,
    pub text_head: ProjectionHead,
}

impl<T: Scalar> EtpModel<T> {
    /// Seeded initialization. Each component draws from its own stream, so
    /// e.g. the ECG encoder weights do not depend on the vocabulary size.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        if config.text_backbone == TextBackbone::Tokens && vocab.len() != config.text.vocab_size {
            return Err(TensorError::Contract(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.text.vocab_size
            )));
        }
        let mut params = ParamStore::new();
        let ecg = EcgEncoder::new(config.ecg.clone(), &mut params, &mut rng::stream(seed, &[1]));
        let text = (config.text_backbone == TextBackbone::Tokens)
            .then(|| TextEncoder::new(config.text.clone(), &mut params, &mut rng::stream(seed, &[2])));
        let ecg_head = ProjectionHead::new(
            &mut params,
            &mut rng::stream(seed, &[3]),
            "ecg_head",
            config.ecg.feature_dim(),
            config.proj_dim,
            config.proj_hidden,
        );
        let text_head = ProjectionHead::new(
            &mut params,
            &mut rng::stream(seed, &[4]),
            "text_head",
            config.text_feature_dim(),
            config.proj_dim,
            config.proj_hidden,
        );
        Ok(Self {
            config,
            vocab,
            params,
            ecg,
            text,
            ecg_head,
            text_head,
        })
    }

    /// Pre-projection ECG features `[B, feature_dim]`.
    pub fn ecg_features(&mut self, g: &Graph<T>, signal: Var, mode: BnMode) -> Result<Var, TensorError> {
        self.ecg.forward(g, &mut self.params, signal, mode)
    }

    /// Projected ECG embedding `[B, d]`, not normalized.
    pub fn ecg_projection(&mut self, g: &Graph<T>, signal: Var, mode: BnMode) -> Result<Var, TensorError> {
        let f = self.ecg_features(g, signal, mode)?;
        self.ecg_head.forward(g, &self.params, f)
    }

    pub fn text_features(&self, g: &Graph<T>, input: TextInput<'_, T>) -> Result<Var, TensorError> {
        match (input, &self.text) {
            (TextInput::Tokens(tokens), Some(enc)) => enc.forward(g, &self.params, tokens),
            (TextInput::External(t), None) => {
                let want = self.config.text_feature_dim();
                if t.rank() != 2 || t.shape()[1] != want {
                    return Err(TensorError::Dimension(format!(
                        "external text features must be [B, {want}], got {:?}",
                        t.shape()
                    )));
                }
                Ok(g.constant(t))
            }
            (TextInput::Tokens(_), None) => Err(TensorError::Contract(
                "model uses external text embeddings; token input given".into(),
            )),
            (TextInput::External(_), Some(_)) => Err(TensorError::Contract(
                "model uses a token text encoder; external features given".into(),
            )),
        }
    }

    pub fn text_projection(&self, g: &Graph<T>, input: TextInput<'_, T>) -> Result<Var, TensorError> {
        let f = self.text_features(g, input)?;
        self.text_head.forward(g, &self.params, f)
    }

    /// Freezes or unfreezes the text encoder table.
    pub fn set_text_frozen(&mut self, frozen: bool) {
        self.config.text.frozen = frozen;
        if let Some(enc) = &self.text {
            self.params.set_requires_grad(enc.embedding, !frozen);
        }
    }

    /// Freezes every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let ids: Vec<_> = self
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.params.set_requires_grad(id, false);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.requires_grad && p.kind == ParamKind::Weight)
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Same model with every parameter and buffer converted to `U`.
    pub fn cast<U: Scalar>(&self) -> EtpModel<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            let id = match p.kind {
                ParamKind::Weight => params.add_weight(p.name.clone(), p.value.cast()),
                ParamKind::Buffer => params.add_buffer(p.name.clone(), p.value.cast()),
            };
            params.set_requires_grad(id, p.requires_grad);
        }
        EtpModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params,
            ecg: self.ecg.clone(),
            text: self.text.clone(),
            ecg_head: self.ecg_head.clone(),
            text_head: self.text_head.clone(),
        }
    }
}

//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use etp_core::nets::{EcgEncoderConfig, ModelConfig, TextBackbone};
use etp_core::trainer::TrainConfig;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "seed",
    "tau_cross",
    "tau_ssl",
    "checkpoint_every",
    "aug.jitter_sigma",
    "aug.scale_min",
    "aug.scale_max",
    "aug.num_segments",
    "aug.invert_prob",
    "aug.seed",
    "model.encoder",
    "model.proj_dim",
    "model.proj_hidden",
    "model.embed_dim",
    "model.text_frozen",
    "model.text_backbone",
    "model.external_dim",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::desk(0),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("bad value {v:?} for {key}")))
}

impl RunConfig {
    /// Defaults, then the file (if any), then `--set` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_pairs(&text, &path.display().to_string())? {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        // the vocabulary is sized from the corpus later
        let mut probe = cfg.model.clone();
        probe.text.vocab_size = usize::MAX;
        probe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "tau_cross" => t.tau_cross = num(key, v)?,
            "tau_ssl" => t.tau_ssl = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "aug.jitter_sigma" => t.augmentation.jitter_sigma = num(key, v)?,
            "aug.scale_min" => t.augmentation.scale_range.0 = num(key, v)?,
            "aug.scale_max" => t.augmentation.scale_range.1 = num(key, v)?,
            "aug.num_segments" => t.augmentation.num_segments = num(key, v)?,
            "aug.invert_prob" => t.augmentation.invert_prob = num(key, v)?,
            "aug.seed" => t.augmentation.seed = num(key, v)?,
            "model.encoder" => {
                m.ecg = match v {
                    "tiny" => EcgEncoderConfig::tiny(),
                    "full" => EcgEncoderConfig::full(),
                    _ => return Err(CliError::Usage(format!("model.encoder must be tiny or full, got {v:?}"))),
                }
            }
            "model.proj_dim" => m.proj_dim = num(key, v)?,
            "model.proj_hidden" => {
                let h: usize = num(key, v)?;
                m.proj_hidden = (h > 0).then_some(h);
            }
            "model.embed_dim" => m.text.embed_dim = num(key, v)?,
            "model.text_frozen" => m.text.frozen = num(key, v)?,
            "model.text_backbone" => {
                m.text_backbone = match v {
                    "tokens" => TextBackbone::Tokens,
                    "external" => TextBackbone::External {
                        dim: match m.text_backbone {
                            TextBackbone::External { dim } => dim,
                            TextBackbone::Tokens => 768,
                        },
                    },
                    _ => return Err(CliError::Usage(format!("model.text_backbone must be tokens or external, got {v:?}"))),
                }
            }
            "model.external_dim" => {
                let dim = num(key, v)?;
                if let TextBackbone::External { dim: d } = &mut m.text_backbone {
                    *d = dim;
                } else {
                    m.text_backbone = TextBackbone::External { dim };
                }
            }
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown config key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let m = &self.model;
        let a = &t.augmentation;
        let encoder = if m.ecg == EcgEncoderConfig::full() {
            "full".to_string()
        } else if m.ecg == EcgEncoderConfig::tiny() {
            "tiny".to_string()
        } else {
            format!("{:?}", m.ecg.stage_channels)
        };
        let (backbone, ext) = match m.text_backbone {
            TextBackbone::Tokens => ("tokens", 0),
            TextBackbone::External { dim } => ("external", dim),
        };
        let values = [
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.weight_decay.to_string(),
            t.seed.to_string(),
            t.tau_cross.to_string(),
            t.tau_ssl.to_string(),
            t.checkpoint_every.to_string(),
            a.jitter_sigma.to_string(),
            a.scale_range.0.to_string(),
            a.scale_range.1.to_string(),
            a.num_segments.to_string(),
            a.invert_prob.to_string(),
            a.seed.to_string(),
            encoder,
            m.proj_dim.to_string(),
            m.proj_hidden.unwrap_or(0).to_string(),
            m.text.embed_dim.to_string(),
            m.text.frozen.to_string(),
            backbone.to_string(),
            ext.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Same file format as the input; parsing it gives back `self`.
    #[cfg(test)]
    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Model settings that must agree between a checkpoint and a config.
pub fn model_mismatch(checkpoint: &ModelConfig, configured: &ModelConfig) -> Option<String> {
    let view = |m: &ModelConfig| {
        RunConfig {
            train: TrainConfig::default(),
            model: m.clone(),
        }
        .pairs()
    };
    let (a, b) = (view(checkpoint), view(configured));
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| k.starts_with("model.") && **k != "model.text_frozen" && b[*k] != **v)
        .map(|(k, v)| format!("{k}: checkpoint {v}, config {}", b[*k]))
        .collect();
    (!diffs.is_empty()).then(|| format!("checkpoint/model-config mismatch ({})", diffs.join("; ")))
}

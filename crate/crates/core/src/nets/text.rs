use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::data::ExternalEmbeddingTable;
use crate::rng::Rng;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
/// Small enough that fresh text embeddings are dominated by the projection
/// bias.
pub const EMBED_INIT_STD: f64 = 0.02;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word-level vocabulary; ids 0..4 are reserved for pad, unk, bos, eos.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Every token occurring at least `min_freq` times, in lexicographic
    /// order after the reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .map(|(t, _)| t);
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

/// Padded `[B, T]` token ids with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for t in 0..len {
                ids.push(s.get(t).copied().unwrap_or(PAD_ID));
                mask.push(t < s.len());
            }
        }
        Self {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }

    pub fn encode(vocab: &Vocabulary, texts: &[&str]) -> Self {
        let seqs: Vec<Vec<usize>> = texts.iter().map(|t| vocab.encode(t)).collect();
        Self::from_sequences(&seqs)
    }

    fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.batch)
            .map(|b| {
                (0..self.len)
                    .filter(|&t| self.mask[b * self.len + t])
                    .map(|t| self.ids[b * self.len + t])
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// When set, the embedding table receives no gradient.
    pub frozen: bool,
}

impl TextEncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < RESERVED.len() {
            return Err(format!(
                "vocab_size {} leaves no room for the {} reserved ids",
                self.vocab_size,
                RESERVED.len()
            ));
        }
        if self.embed_dim == 0 {
            return Err("embed_dim must be positive".into());
        }
        Ok(())
    }
}

/// Token embedding followed by masked mean pooling.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub embedding: ParamId,
}

impl TextEncoder {
    pub fn new<T: Scalar>(config: TextEncoderConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let init = Normal::new(0.0, EMBED_INIT_STD).expect("positive std");
        let data: Vec<f64> = (0..config.vocab_size * config.embed_dim)
            .map(|_| init.sample(rng))
            .collect();
        let table = Tensor::from_f64(vec![config.vocab_size, config.embed_dim], &data).expect("shape");
        let embedding = store.add_weight("text.embedding", table);
        store.set_requires_grad(embedding, !config.frozen);
        Self { config, embedding }
    }

    /// `[B, T]` ids -> `[B, embed_dim]`
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, tokens: &TokenBatch) -> Result<Var, TensorError> {
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(TensorError::Dimension(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(store, self.embedding);
        g.embed_mean(table, &tokens.rows())
    }
}

/// Looks up a precomputed text vector; the result is a constant.
pub fn encode_text_external<T: Scalar>(table: &ExternalEmbeddingTable, text_id: &str) -> Result<Tensor<T>, crate::data::DataError> {
    let v = table.get(text_id)?;
    Ok(Tensor::new(vec![v.len()], v.iter().map(|&x| T::from_f64(x as f64)).collect()).expect("non-empty vector"))
}

use super::EvalError;
use crate::autodiff::{BnMode, Graph, Tensor};
use crate::data::{stack_signals, EcgRecord, ExternalEmbeddingTable, PromptSet};
use crate::nets::{EtpModel, TextBackbone, TextInput, TokenBatch};

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Pooled encoder output.
    Features,
    /// Projected and L2-normalized embedding.
    Embedding,
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Encodes every record with batchnorm in eval mode, so each row depends
/// only on its own record. Returns `[N, width]`.
pub fn encode_ecg(model: &EtpModel<f32>, records: &[EcgRecord], stage: Stage) -> Result<Tensor<f64>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Contract("no records to encode".into()));
    }
    let mut work = model.clone();
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in records.chunks(CHUNK) {
        let refs: Vec<&EcgRecord> = chunk.iter().collect();
        let g = Graph::new();
        let x = g.constant(stack_signals::<f32>(&refs)?);
        let out = match stage {
            Stage::Features => work.ecg_features(&g, x, BnMode::Eval)?,
            Stage::Embedding => {
                let e = work.ecg_projection(&g, x, BnMode::Eval)?;
                g.l2_normalize(e)?
            }
        };
        width = g.shape(out)[1];
        data.extend(to_f64(&g.value(out)));
    }
    if work.params.digest("") != model.params.digest("") {
        return Err(EvalError::Contract("encoder parameters changed during evaluation".into()));
    }
    Ok(Tensor::new(vec![records.len(), width], data)?)
}

/// Normalized text embeddings of the rendered prompts, `[K, d]`. With an
/// external text backbone the prompt vectors are looked up by class code.
pub fn encode_prompts(model: &EtpModel<f32>, prompts: &PromptSet, external: Option<&ExternalEmbeddingTable>) -> Result<Tensor<f64>, EvalError> {
    let g = Graph::new();
    let tokens;
    let input = match model.config.text_backbone {
        TextBackbone::Tokens => {
            let texts: Vec<&str> = prompts.rendered.iter().map(String::as_str).collect();
            tokens = TokenBatch::encode(&model.vocab, &texts);
            TextInput::Tokens(&tokens)
        }
        TextBackbone::External { dim } => {
            let table = external.ok_or_else(|| {
                EvalError::Contract("model uses external text embeddings; no prompt table given".into())
            })?;
            let mut data = Vec::with_capacity(prompts.rendered.len() * dim);
            for c in &prompts.taxonomy.classes {
                data.extend_from_slice(table.get(&c.code)?);
            }
            TextInput::External(Tensor::new(vec![prompts.rendered.len(), dim], data)?)
        }
    };
    let t = model.text_projection(&g, input)?;
    let t = g.l2_normalize(t)?;
    let shape = g.shape(t);
    let out = Tensor::new(shape, to_f64(&g.value(t)))?;
    Ok(out)
}

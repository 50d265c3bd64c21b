//! Backend-agnostic contract to pre-trained language models.
//!
//! Training, prompting and generation code only talk to [`LanguageBackend`].
//! The crate ships the seeded [`TinyBackend`] so every code path runs without
//! downloading checkpoints.

mod params;
mod tiny;
pub mod tokenizer;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use params::{normal_tensor, ParamStore};
pub use tiny::{TinyBackend, TinyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    MaskedLm,
    GenerativeLm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub kind: BackendKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub mask_token: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Embeddings,
    Encoder(usize),
    Head,
}

/// A group of backbone parameters sharing a name prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerHandle {
    pub name: String,
    pub prefix: String,
    pub kind: LayerKind,
}

/// Hidden states of every layer for one batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `num_layers + 1` tensors of shape `B x L x hidden`, embeddings output first.
    pub per_layer_states: Vec<Tensor>,
    /// `B x L`, 1 on real positions and 0 on padding.
    pub attention_mask: Tensor,
    /// Indices of inputs that were cut to the maximum length.
    pub truncated: Vec<usize>,
}

impl EncodedBatch {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.attention_mask.dim(0)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolStrategy {
    #[default]
    ClsLast,
    ClsLayer(usize),
    MeanLast,
}

/// Reduces per-token states to one vector per sequence.
pub fn pool(batch: &EncodedBatch, strategy: PoolStrategy) -> Result<Tensor> {
    let states = &batch.per_layer_states;
    let last = states
        .last()
        .ok_or_else(|| Error::contract("encoded batch has no layers"))?;
    match strategy {
        PoolStrategy::ClsLast => Ok(last.i((.., 0, ..))?),
        PoolStrategy::ClsLayer(k) => {
            let layer = states
                .get(k)
                .ok_or_else(|| Error::contract(format!("layer {k} out of range 0..={}", states.len() - 1)))?;
            Ok(layer.i((.., 0, ..))?)
        }
        PoolStrategy::MeanLast => {
            let mask = batch.attention_mask.to_dtype(last.dtype())?.unsqueeze(D::Minus1)?;
            let summed = last.broadcast_mul(&mask)?.sum(1)?;
            let counts = mask.sum(1)?;
            Ok(summed.broadcast_div(&counts)?)
        }
    }
}

/// Operations a language-model backend exposes to the rest of the framework.
///
/// `prefix` arguments carry trainable soft-prompt embeddings (`P x hidden`)
/// inserted right after the start token.
pub trait LanguageBackend {
    fn id(&self) -> &str;
    fn capabilities(&self) -> &BackendCapabilities;
    fn device(&self) -> &Device;
    fn dtype(&self) -> DType;
    fn max_length(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn params(&self) -> &ParamStore;

    /// Backbone layer groups ordered bottom to top, then output heads.
    fn parameter_layers(&self) -> Vec<LayerHandle>;

    /// Ids of `text` without special start/end tokens.
    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;

    /// Input embeddings of the tokens of `text`, detached, `n x hidden`.
    fn token_embeddings(&self, text: &str) -> Result<Tensor>;

    fn encode(&self, texts: &[String], prefix: Option<&Tensor>) -> Result<EncodedBatch>;

    /// Vocabulary logits at the single mask position of each text, `B x V`.
    fn mask_fill_logits(&self, texts: &[String], prefix: Option<&Tensor>) -> Result<Tensor>;

    /// Summed log-probability of each answer (plus end token) following its prompt.
    fn answer_log_likelihood(&self, prompts: &[String], answers: &[String], prefix: Option<&Tensor>) -> Result<Tensor>;

    /// Newly generated text only. `deterministic` selects greedy decoding.
    fn generate(
        &self,
        prompt: &str,
        max_new_tokens: usize,
        deterministic: bool,
        prefix: Option<&Tensor>,
    ) -> Result<String>;
}

/// Softmax of [`LanguageBackend::mask_fill_logits`]: one probability row per prompt.
pub fn mask_fill_distribution(backend: &dyn LanguageBackend, texts: &[String]) -> Result<Vec<Vec<f64>>> {
    let logits = backend.mask_fill_logits(texts, None)?;
    let probs = candle_nn::ops::softmax_last_dim(&logits.to_dtype(DType::F64)?)?;
    Ok(probs.to_vec2::<f64>()?)
}

/// Identifier of the masked tiny backend.
pub const TINY_TEST: &str = "tiny_test";
/// Identifier of the causal tiny backend.
pub const TINY_TEST_GENERATIVE: &str = "tiny_test_generative";

/// Resolves a backend identifier from configuration.
///
/// Tiny backends are initialised from a fixed seed so that, like a released
/// checkpoint, the same identifier always yields the same weights.
pub fn resolve_backend(id: &str) -> Result<Box<dyn LanguageBackend>> {
    match id {
        TINY_TEST => Ok(Box::new(TinyBackend::new(TinyConfig::masked())?)),
        TINY_TEST_GENERATIVE => Ok(Box::new(TinyBackend::new(TinyConfig::generative())?)),
        other => Err(Error::Unsupported(format!(
            "backend `{other}` is not bundled; available: {TINY_TEST}, {TINY_TEST_GENERATIVE}"
        ))),
    }
}

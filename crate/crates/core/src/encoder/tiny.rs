use std::sync::Mutex;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tokenizer::{self, CharTokenizer};
use super::{
    normal_tensor, BackendCapabilities, BackendKind, EncodedBatch, LanguageBackend, LayerHandle, LayerKind, ParamStore,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TinyConfig {
    pub kind: BackendKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_length: usize,
    /// Scale of query/key weights relative to `1/sqrt(hidden)`; larger values give peakier attention.
    pub attention_sharpness: f64,
    pub seed: u64,
}

impl TinyConfig {
    pub fn masked() -> Self {
        TinyConfig {
            kind: BackendKind::MaskedLm,
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            ffn_size: 64,
            max_length: 512,
            attention_sharpness: 3.0,
            seed: 17,
        }
    }

    pub fn generative() -> Self {
        TinyConfig {
            kind: BackendKind::GenerativeLm,
            ..Self::masked()
        }
    }
}

/// A small post-norm transformer over characters with a tied LM head.
///
/// Weights are drawn from a fixed seed, so it behaves like a frozen checkpoint.
/// The masked variant attends bidirectionally; the generative one causally.
pub struct TinyBackend {
    id: String,
    config: TinyConfig,
    capabilities: BackendCapabilities,
    tokenizer: CharTokenizer,
    params: ParamStore,
    device: Device,
    sampler: Mutex<ChaCha8Rng>,
}

struct Prepared {
    ids: Vec<Vec<u32>>,
    truncated: Vec<usize>,
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("rank >= 1");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let out = x.reshape((rows, inner))?.matmul(&w.t()?)?.broadcast_add(b)?;
    let mut out_dims = dims;
    *out_dims.last_mut().expect("rank >= 1") = w.dim(0)?;
    Ok(out.reshape(out_dims)?)
}

fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.detach().max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.detach().max_keepdim(D::Minus1)?;
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

impl TinyBackend {
    pub fn new(config: TinyConfig) -> Result<Self> {
        if config.num_layers == 0 || !config.hidden_size.is_multiple_of(config.num_heads) {
            return Err(Error::contract(
                "tiny backend needs >= 1 layer and heads dividing hidden",
            ));
        }
        let device = Device::Cpu;
        let tokenizer = CharTokenizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_size;
        let f = config.ffn_size;
        let std = 1.0 / (h as f64).sqrt();
        let mut params = ParamStore::new();
        let mut normal = |store: &mut ParamStore, name: String, shape: &[usize], std: f64| -> Result<()> {
            store.insert(name, normal_tensor(&mut rng, shape, std, false, &device)?)?;
            Ok(())
        };
        let ones = |n: usize| Tensor::ones(n, DType::F32, &device);
        let zeros = |n: usize| Tensor::zeros(n, DType::F32, &device);

        normal(
            &mut params,
            "embeddings.token".into(),
            &[tokenizer.vocab_size(), h],
            1.0,
        )?;
        normal(&mut params, "embeddings.position".into(), &[config.max_length, h], 0.5)?;
        params.insert("embeddings.norm.gamma", ones(h)?)?;
        params.insert("embeddings.norm.beta", zeros(h)?)?;
        for l in 0..config.num_layers {
            for proj in ["query", "key", "value", "output"] {
                let scale = match proj {
                    "query" | "key" => config.attention_sharpness,
                    _ => 1.0,
                };
                normal(
                    &mut params,
                    format!("layer.{l}.attention.{proj}.weight"),
                    &[h, h],
                    std * scale,
                )?;
                params.insert(format!("layer.{l}.attention.{proj}.bias"), zeros(h)?)?;
            }
            params.insert(format!("layer.{l}.attention.norm.gamma"), ones(h)?)?;
            params.insert(format!("layer.{l}.attention.norm.beta"), zeros(h)?)?;
            normal(&mut params, format!("layer.{l}.ffn.up.weight"), &[f, h], std)?;
            params.insert(format!("layer.{l}.ffn.up.bias"), zeros(f)?)?;
            normal(
                &mut params,
                format!("layer.{l}.ffn.down.weight"),
                &[h, f],
                1.0 / (f as f64).sqrt(),
            )?;
            params.insert(format!("layer.{l}.ffn.down.bias"), zeros(h)?)?;
            params.insert(format!("layer.{l}.ffn.norm.gamma"), ones(h)?)?;
            params.insert(format!("layer.{l}.ffn.norm.beta"), zeros(h)?)?;
        }
        normal(&mut params, "lm_head.dense.weight".into(), &[h, h], std)?;
        params.insert("lm_head.dense.bias", zeros(h)?)?;
        params.insert("lm_head.norm.gamma", ones(h)?)?;
        params.insert("lm_head.norm.beta", zeros(h)?)?;
        params.insert("lm_head.bias", zeros(tokenizer.vocab_size())?)?;

        let (id, mask_token) = match config.kind {
            BackendKind::MaskedLm => (super::TINY_TEST, Some(tokenizer::SPECIALS[3].to_owned())),
            BackendKind::GenerativeLm => (super::TINY_TEST_GENERATIVE, None),
        };
        Ok(TinyBackend {
            id: id.to_owned(),
            capabilities: BackendCapabilities {
                kind: config.kind,
                num_layers: config.num_layers,
                hidden_size: h,
                mask_token,
            },
            sampler: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed)),
            config,
            tokenizer,
            params,
            device,
        })
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.tensor(name)
    }

    fn causal(&self) -> bool {
        self.config.kind == BackendKind::GenerativeLm
    }

    fn prefix_len(prefix: Option<&Tensor>) -> Result<usize> {
        Ok(match prefix {
            Some(p) => p.dim(0)?,
            None => 0,
        })
    }

    /// `<s> text </s>` per input, cut from the right to fit the length budget.
    fn prepare_encoder(&self, texts: &[String], prefix_len: usize) -> Result<Prepared> {
        let budget = self.budget(prefix_len)?;
        let mut truncated = Vec::new();
        let ids = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut body = self.tokenizer.tokenize(t);
                if body.len() + 2 > budget {
                    body.truncate(budget - 2);
                    truncated.push(i);
                }
                let mut ids = Vec::with_capacity(body.len() + 2);
                ids.push(tokenizer::CLS);
                ids.extend(body);
                ids.push(tokenizer::SEP);
                ids
            })
            .collect();
        Ok(Prepared { ids, truncated })
    }

    fn budget(&self, prefix_len: usize) -> Result<usize> {
        let budget = self.config.max_length.saturating_sub(prefix_len);
        if budget < 3 {
            return Err(Error::contract(format!(
                "soft prompt of {prefix_len} leaves no room within max length {}",
                self.config.max_length
            )));
        }
        Ok(budget)
    }

    /// Runs the stack; returns per-layer states and the real length of each row.
    fn forward(&self, ids: &[Vec<u32>], prefix: Option<&Tensor>) -> Result<(Vec<Tensor>, Tensor)> {
        let b = ids.len();
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        let h = self.config.hidden_size;
        let p = Self::prefix_len(prefix)?;
        let l0 = ids.iter().map(Vec::len).max().unwrap_or(0);
        let l = l0 + p;
        let flat: Vec<u32> = ids
            .iter()
            .flat_map(|row| {
                row.iter()
                    .copied()
                    .chain(std::iter::repeat_n(tokenizer::PAD, l0 - row.len()))
            })
            .collect();
        let flat = Tensor::from_vec(flat, b * l0, &self.device)?;
        let mut x = self
            .p("embeddings.token")?
            .index_select(&flat, 0)?
            .reshape((b, l0, h))?;
        if let Some(prefix) = prefix {
            let soft = prefix.to_dtype(DType::F32)?.unsqueeze(0)?.broadcast_as((b, p, h))?;
            x = Tensor::cat(&[x.narrow(1, 0, 1)?, soft, x.narrow(1, 1, l0 - 1)?], 1)?;
        }
        let pos = self.p("embeddings.position")?.narrow(0, 0, l)?.unsqueeze(0)?;
        x = layer_norm(
            &x.broadcast_add(&pos)?,
            &self.p("embeddings.norm.gamma")?,
            &self.p("embeddings.norm.beta")?,
        )?;

        let lengths: Vec<usize> = ids.iter().map(|r| r.len() + p).collect();
        let mut mask = vec![0f32; b * l];
        let mut bias = vec![0f32; b * l * l];
        for (row, &len) in lengths.iter().enumerate() {
            mask[row * l..row * l + len].iter_mut().for_each(|m| *m = 1.0);
            for q in 0..l {
                for k in 0..l {
                    if k >= len || (self.causal() && k > q) {
                        bias[(row * l + q) * l + k] = -1e9;
                    }
                }
            }
        }
        let attention_mask = Tensor::from_vec(mask, (b, l), &self.device)?;
        let bias = Tensor::from_vec(bias, (b, 1, l, l), &self.device)?;

        let mut states = vec![x.clone()];
        for layer in 0..self.config.num_layers {
            x = self.layer(layer, &x, &bias)?;
            states.push(x.clone());
        }
        Ok((states, attention_mask))
    }

    fn layer(&self, layer: usize, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, l, h) = x.dims3()?;
        let heads = self.config.num_heads;
        let dh = h / heads;
        let w = |n: &str| self.p(&format!("layer.{layer}.{n}"));
        let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(linear(x, &w("attention.query.weight")?, &w("attention.query.bias")?)?)?;
        let k = split(linear(x, &w("attention.key.weight")?, &w("attention.key.bias")?)?)?;
        let v = split(linear(x, &w("attention.value.weight")?, &w("attention.value.bias")?)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?.broadcast_add(bias)?;
        let context = softmax_last(&scores)?
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, h))?;
        let attended = linear(&context, &w("attention.output.weight")?, &w("attention.output.bias")?)?;
        let x = layer_norm(
            &(x + attended)?,
            &w("attention.norm.gamma")?,
            &w("attention.norm.beta")?,
        )?;
        let up = linear(&x, &w("ffn.up.weight")?, &w("ffn.up.bias")?)?.gelu()?;
        let down = linear(&up, &w("ffn.down.weight")?, &w("ffn.down.bias")?)?;
        layer_norm(&(x + down)?, &w("ffn.norm.gamma")?, &w("ffn.norm.beta")?)
    }

    /// Tied output head: hidden states to vocabulary logits.
    fn lm_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let x = linear(hidden, &self.p("lm_head.dense.weight")?, &self.p("lm_head.dense.bias")?)?.gelu()?;
        let x = layer_norm(&x, &self.p("lm_head.norm.gamma")?, &self.p("lm_head.norm.beta")?)?;
        linear(&x, &self.p("embeddings.token")?, &self.p("lm_head.bias")?)
    }

    fn require(&self, kind: BackendKind, what: &str) -> Result<()> {
        if self.config.kind != kind {
            return Err(Error::Unsupported(format!(
                "{what} on a {:?} backend",
                self.config.kind
            )));
        }
        Ok(())
    }

    /// `<s> prompt` cut from the left so the tail (and any answer) fits.
    fn prompt_ids(&self, prompt: &str, reserve: usize, prefix_len: usize) -> Result<(Vec<u32>, bool)> {
        let budget = self.budget(prefix_len)?;
        let mut body = self.tokenizer.tokenize(prompt);
        let room = budget.saturating_sub(1 + reserve);
        let truncated = body.len() > room;
        if truncated {
            body.drain(..body.len() - room);
        }
        let mut ids = vec![tokenizer::CLS];
        ids.extend(body);
        Ok((ids, truncated))
    }
}

impl LanguageBackend for TinyBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> &BackendCapabilities {
        &self.capabilities
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn dtype(&self) -> DType {
        DType::F32
    }

    fn max_length(&self) -> usize {
        self.config.max_length
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn parameter_layers(&self) -> Vec<LayerHandle> {
        let mut layers = vec![LayerHandle {
            name: "embeddings".into(),
            prefix: "embeddings.".into(),
            kind: LayerKind::Embeddings,
        }];
        layers.extend((0..self.config.num_layers).map(|l| LayerHandle {
            name: format!("layer.{l}"),
            prefix: format!("layer.{l}."),
            kind: LayerKind::Encoder(l),
        }));
        layers.push(LayerHandle {
            name: "lm_head".into(),
            prefix: "lm_head.".into(),
            kind: LayerKind::Head,
        });
        layers
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.tokenize(text)
    }

    fn decode(&self, ids: &[u32]) -> String {
        self.tokenizer.decode(ids)
    }

    fn token_embeddings(&self, text: &str) -> Result<Tensor> {
        let ids = self.tokenizer.tokenize(text);
        let n = ids.len();
        let ids = Tensor::from_vec(ids, n, &self.device)?;
        Ok(self.p("embeddings.token")?.index_select(&ids, 0)?.detach())
    }

    fn encode(&self, texts: &[String], prefix: Option<&Tensor>) -> Result<EncodedBatch> {
        let prepared = self.prepare_encoder(texts, Self::prefix_len(prefix)?)?;
        let (per_layer_states, attention_mask) = self.forward(&prepared.ids, prefix)?;
        Ok(EncodedBatch {
            per_layer_states,
            attention_mask,
            truncated: prepared.truncated,
        })
    }

    fn mask_fill_logits(&self, texts: &[String], prefix: Option<&Tensor>) -> Result<Tensor> {
        self.require(BackendKind::MaskedLm, "mask filling")?;
        for t in texts {
            let n = self
                .tokenizer
                .tokenize(t)
                .iter()
                .filter(|&&id| id == tokenizer::MASK)
                .count();
            if n != 1 {
                return Err(Error::contract(format!(
                    "prompt has {n} mask tokens, expected exactly 1"
                )));
            }
        }
        let p = Self::prefix_len(prefix)?;
        let prepared = self.prepare_encoder(texts, p)?;
        let positions = prepared
            .ids
            .iter()
            .map(|row| {
                row.iter()
                    .position(|&id| id == tokenizer::MASK)
                    .map(|i| i + p)
                    .ok_or_else(|| Error::contract("mask token removed by truncation"))
            })
            .collect::<Result<Vec<_>>>()?;
        let (states, _) = self.forward(&prepared.ids, prefix)?;
        let last = states.last().expect("at least one layer");
        let rows = positions
            .iter()
            .enumerate()
            .map(|(b, &pos)| last.i((b, pos)).and_then(|t| t.unsqueeze(0)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        self.lm_logits(&Tensor::cat(&rows, 0)?)
    }

    fn answer_log_likelihood(&self, prompts: &[String], answers: &[String], prefix: Option<&Tensor>) -> Result<Tensor> {
        self.require(BackendKind::GenerativeLm, "answer likelihood")?;
        if prompts.len() != answers.len() {
            return Err(Error::contract("prompts and answers differ in length"));
        }
        let p = Self::prefix_len(prefix)?;
        let mut ids = Vec::with_capacity(prompts.len());
        let mut targets = Vec::with_capacity(prompts.len());
        for (prompt, answer) in prompts.iter().zip(answers) {
            let mut answer_ids = self.tokenizer.tokenize(answer);
            answer_ids.push(tokenizer::SEP);
            let (mut row, _) = self.prompt_ids(prompt, answer_ids.len(), p)?;
            let start = row.len();
            row.extend(&answer_ids);
            // Token at index t >= 1 sits at t + p once the prefix is inserted; its predictor is one step earlier.
            targets.push(
                answer_ids
                    .iter()
                    .enumerate()
                    .map(|(k, &tok)| (start + k + p - 1, tok))
                    .collect::<Vec<_>>(),
            );
            ids.push(row);
        }
        let (states, _) = self.forward(&ids, prefix)?;
        let logits = self.lm_logits(states.last().expect("at least one layer"))?;
        let (b, l, v) = logits.dims3()?;
        let mut select = vec![0f32; b * l * v];
        for (row, picks) in targets.iter().enumerate() {
            for &(pos, tok) in picks {
                select[(row * l + pos) * v + tok as usize] = 1.0;
            }
        }
        let select = Tensor::from_vec(select, (b, l, v), &self.device)?;
        Ok((log_softmax_last(&logits)? * select)?.sum((1, 2))?)
    }

    fn generate(
        &self,
        prompt: &str,
        max_new_tokens: usize,
        deterministic: bool,
        prefix: Option<&Tensor>,
    ) -> Result<String> {
        self.require(BackendKind::GenerativeLm, "generation")?;
        let p = Self::prefix_len(prefix)?;
        let (mut ids, _) = self.prompt_ids(prompt, max_new_tokens, p)?;
        let mut generated = Vec::new();
        for _ in 0..max_new_tokens {
            let (states, _) = self.forward(std::slice::from_ref(&ids), prefix)?;
            let last = states.last().expect("at least one layer");
            let pos = last.dim(1)? - 1;
            let logits = self.lm_logits(&last.i((0, pos))?.unsqueeze(0)?)?.squeeze(0)?;
            let logits = logits.to_vec1::<f32>()?;
            let next = if deterministic {
                logits
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i as u32 != tokenizer::PAD)
                    .fold(
                        (0usize, f32::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0 as u32
            } else {
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f64> = logits.iter().map(|&v| f64::from(v - max).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::contract(e.to_string()))?;
                let mut rng = self.sampler.lock().expect("sampler lock poisoned");
                dist.sample(&mut *rng) as u32
            };
            if next == tokenizer::SEP {
                break;
            }
            generated.push(next);
            ids.push(next);
        }
        Ok(self.tokenizer.decode(&generated))
    }
}

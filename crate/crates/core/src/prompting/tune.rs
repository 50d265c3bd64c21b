use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::template::{render, PromptTemplate, SoftPromptInit, TemplateMode};
use super::verbalizer::{binary_mask_logit, parse_binary_answer, parse_open_answer, score_binary_mask, Verbalizer};
use crate::corpus::{Argument, Dataset, InputStyle, LabelMatrix, ValueTaxonomy};
use crate::encoder::{normal_tensor, BackendKind, LanguageBackend, ParamStore, PoolStrategy};
use crate::error::{Error, Result};
use crate::losses::{bce_multilabel, LossConfig};
use crate::metrics::{self, RunResult};
use crate::training::{
    batch_plan, build_param_groups, predict, scalar, train, ClStrategy, Classifier, ClassifierHead, GroupOptimizer,
    HeadConfig, HeadVariant, HistoryRecord, LrSchedule, Phase, TrainConfig, TrainHistory,
};

/// Name of the soft-prompt parameter (`P x hidden`).
pub const SOFT_PROMPT_PARAM: &str = "prompt.embeddings";
const RANDOM_INIT_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    /// Categories to tune on; empty means all.
    pub categories: Vec<String>,
    /// Fill `{knowledge}` slots from the verbalizer.
    pub use_knowledge: bool,
    /// Generation budget for BCA, OA and CoT answers.
    pub max_new_tokens: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            categories: Vec::new(),
            use_knowledge: true,
            max_new_tokens: 8,
        }
    }
}

impl PromptOptions {
    fn category_indices(&self, taxonomy: &ValueTaxonomy) -> Result<Vec<usize>> {
        if self.categories.is_empty() {
            return Ok((0..taxonomy.len()).collect());
        }
        self.categories
            .iter()
            .map(|name| {
                taxonomy.index_of(name).ok_or_else(|| Error::Config {
                    field: "prompt.categories".into(),
                    message: format!("unknown category `{name}`"),
                })
            })
            .collect()
    }
}

/// Renders one prompt per (argument, category), or one per argument for CLS.
pub fn render_dataset(
    template: &PromptTemplate,
    arguments: &[&Argument],
    taxonomy: &ValueTaxonomy,
    categories: &[usize],
    verbalizer: Option<&Verbalizer>,
) -> Result<Vec<String>> {
    let mut texts = Vec::with_capacity(arguments.len() * categories.len().max(1));
    for arg in arguments {
        if !template.mode.per_category() {
            texts.push(render(template, arg, None, None)?.text);
            continue;
        }
        for &j in categories {
            let category = taxonomy
                .get(j)
                .ok_or_else(|| Error::contract(format!("category index {j} out of range")))?;
            let knowledge = verbalizer.and_then(|v| v.knowledge(&category.name));
            texts.push(render(template, arg, Some(category), knowledge)?.text);
        }
    }
    Ok(texts)
}

/// Initial soft-prompt embeddings, or `None` when the template has none.
pub fn init_soft_prompt(backend: &dyn LanguageBackend, template: &PromptTemplate, seed: u64) -> Result<Option<Tensor>> {
    let p = template.soft_prompt_length;
    if p == 0 {
        return Ok(None);
    }
    let h = backend.capabilities().hidden_size;
    let frame = match template.soft_prompt_init {
        SoftPromptInit::FromFrameTokens => Some(backend.token_embeddings(&template.literal_text()?)?),
        SoftPromptInit::Random => None,
    };
    let init = match frame {
        Some(tokens) if tokens.dim(0)? > 0 => {
            let n = tokens.dim(0)?;
            let index: Vec<u32> = (0..p).map(|i| (i % n) as u32).collect();
            tokens.index_select(&Tensor::new(index.as_slice(), backend.device())?, 0)?
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            normal_tensor(&mut rng, &[p, h], RANDOM_INIT_STD, false, backend.device())?
        }
    };
    log::info!(
        "soft prompt {p}x{h} initialised {:?} (seed {seed})",
        template.soft_prompt_init
    );
    Ok(Some(init.to_dtype(backend.dtype())?.detach()))
}

/// Trained prompt parameters: a soft prompt for MBC/BCA/OA, a head for CLS.
#[derive(Debug, Clone)]
pub struct PromptTuned {
    pub template: PromptTemplate,
    pub soft_prompt: Option<Tensor>,
    pub head: Option<ClassifierHead>,
    pub history: TrainHistory,
}

fn answer_for(mode: TemplateMode, positive: bool, verbalizer: &Verbalizer, category: &str) -> Result<String> {
    let word = match (mode, positive) {
        (TemplateMode::Oa, true) => verbalizer.category(category)?.words[0].clone(),
        (_, true) => verbalizer.yes_words[0].clone(),
        (_, false) => verbalizer.no_words[0].clone(),
    };
    Ok(format!(" {word}"))
}

fn require_kind(backend: &dyn LanguageBackend, mode: TemplateMode, kind: BackendKind) -> Result<()> {
    if backend.capabilities().kind != kind {
        return Err(Error::Unsupported(format!(
            "{mode} needs a {kind:?} backend, `{}` is {:?}",
            backend.id(),
            backend.capabilities().kind
        )));
    }
    Ok(())
}

/// Trains prompt parameters with the backbone frozen.
///
/// MBC minimises BCE on the verbalised mask probability; BCA and OA minimise
/// the negative log-likelihood of the gold answer; CLS keeps the hard frame
/// and trains multi-head classifiers. CoT is inference only.
pub fn prompt_tune(
    dataset: &Dataset,
    backend: &dyn LanguageBackend,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    taxonomy: &ValueTaxonomy,
    config: &TrainConfig,
    options: &PromptOptions,
) -> Result<PromptTuned> {
    config.validate()?;
    template.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("cannot tune prompts on an empty dataset"));
    }
    match template.mode {
        TemplateMode::Cot => {
            return Err(Error::Unsupported(
                "CoT prompts are inference only and cannot be tuned".into(),
            ))
        }
        TemplateMode::Cls => {
            let frozen = TrainConfig {
                trainable_top_layers: 0,
                cl_strategy: ClStrategy::None,
                input_style: InputStyle::default(),
                ..config.clone()
            };
            let head = HeadConfig {
                variant: HeadVariant::MultiHead,
                input_dim: backend.capabilities().hidden_size,
                num_labels: dataset.labels().num_labels(),
            };
            let out = train(dataset, backend, &head, &frozen, &LossConfig::default(), None)?;
            return Ok(PromptTuned {
                template: template.clone(),
                soft_prompt: None,
                head: Some(out.head),
                history: out.history,
            });
        }
        TemplateMode::Mbc => require_kind(backend, template.mode, BackendKind::MaskedLm)?,
        TemplateMode::Bca | TemplateMode::Oa => require_kind(backend, template.mode, BackendKind::GenerativeLm)?,
    }
    if template.soft_prompt_length == 0 {
        return Err(Error::contract(format!(
            "{} template has soft_prompt_length 0: nothing to train",
            template.mode
        )));
    }
    verbalizer.check_covers(taxonomy)?;
    let categories = options.category_indices(taxonomy)?;
    let knowledge = options.use_knowledge.then_some(verbalizer);
    let answer_tokens = verbalizer.project(backend)?;

    let mut store = ParamStore::new();
    let init = init_soft_prompt(backend, template, config.seed)?.expect("nonzero soft prompt length");
    let prompt = store.insert(SOFT_PROMPT_PARAM, init)?;
    let groups = build_param_groups(backend, config.lr, config.lr_decay, 0)?;
    let mut opt = GroupOptimizer::new(&groups, config.weight_decay, config.max_grad_norm, |p| {
        store.vars_with_prefix(p)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = dataset.len();
    let steps = config.steps_for(config.epochs, n);
    let schedule = LrSchedule::new(config.scheduler, steps, config.warmup_ratio);
    let plan = batch_plan(n, config.batch_size, steps, &mut rng);
    let args = dataset.arguments();
    let labels = dataset.labels();
    let mut history = TrainHistory::default();
    for (step, batch) in plan.iter().enumerate() {
        let batch_args: Vec<&Argument> = batch.iter().map(|&i| &args[i]).collect();
        let texts = render_dataset(template, &batch_args, taxonomy, &categories, knowledge)?;
        let gold: Vec<u8> = batch
            .iter()
            .flat_map(|&i| categories.iter().map(move |&j| labels.get(i, j)))
            .collect();
        let loss = match template.mode {
            TemplateMode::Mbc => {
                let logits = backend.mask_fill_logits(&texts, Some(prompt.as_tensor()))?;
                let z = binary_mask_logit(&logits, &answer_tokens)?.reshape((batch.len(), categories.len()))?;
                let targets: Vec<f32> = gold.iter().map(|&y| f32::from(y)).collect();
                let targets = Tensor::from_vec(targets, (batch.len(), categories.len()), backend.device())?;
                bce_multilabel(&z, &targets)?
            }
            _ => {
                let answers = batch
                    .iter()
                    .flat_map(|_| categories.iter())
                    .zip(&gold)
                    .map(|(&j, &y)| answer_for(template.mode, y == 1, verbalizer, &taxonomy.categories()[j].name))
                    .collect::<Result<Vec<_>>>()?;
                let ll = backend.answer_log_likelihood(&texts, &answers, Some(prompt.as_tensor()))?;
                ll.mean_all()?.neg()?
            }
        };
        let factor = schedule.factor(step);
        let mut grads = loss.backward()?;
        opt.step(&mut grads, factor)?;
        history.records.push(HistoryRecord {
            phase: Phase::Prompt,
            step,
            loss: Some(scalar(&loss)?),
            lr: config.lr * factor,
            split: None,
            f1: None,
        });
    }
    Ok(PromptTuned {
        template: template.clone(),
        soft_prompt: Some(prompt.as_tensor().detach()),
        head: None,
        history,
    })
}

/// A backend plus the prompt parameters used to query it.
pub struct PromptedModel<'a> {
    pub backend: &'a dyn LanguageBackend,
    pub template: PromptTemplate,
    pub soft_prompt: Option<Tensor>,
    pub head: Option<ClassifierHead>,
    pub pooling: PoolStrategy,
}

#[derive(Debug, Clone)]
pub struct PromptEvaluation {
    pub prediction: LabelMatrix,
    pub result: RunResult,
    /// Generated answers that named no choice; scored negative.
    pub undecided: usize,
    /// Mask distributions with no mass on either answer set.
    pub low_confidence: usize,
}

/// Queries every category for every argument and scores the assembled labels.
pub fn evaluate_prompted(
    model: &PromptedModel<'_>,
    dataset: &Dataset,
    taxonomy: &ValueTaxonomy,
    verbalizer: &Verbalizer,
    options: &PromptOptions,
    threshold: f64,
    batch_size: usize,
) -> Result<PromptEvaluation> {
    model.template.validate()?;
    let c = taxonomy.len();
    let all: Vec<usize> = (0..c).collect();
    let knowledge = options.use_knowledge.then_some(verbalizer);
    let args: Vec<&Argument> = dataset.arguments().iter().collect();
    let prefix = model.soft_prompt.as_ref();
    let mut rows: Vec<Vec<u8>> = Vec::with_capacity(args.len());
    let (mut undecided, mut low_confidence) = (0, 0);
    match model.template.mode {
        TemplateMode::Cls => {
            let head = model
                .head
                .clone()
                .ok_or_else(|| Error::contract("CLS evaluation needs a trained head"))?;
            let classifier = Classifier {
                backend: model.backend,
                head,
                pooling: model.pooling,
                input_style: InputStyle::default(),
            };
            rows = predict(&classifier, dataset, threshold, batch_size)?
                .labels
                .rows()
                .to_vec();
        }
        TemplateMode::Mbc => {
            let tokens = verbalizer.project(model.backend)?;
            for chunk in args.chunks(batch_size.max(1)) {
                let texts = render_dataset(&model.template, chunk, taxonomy, &all, knowledge)?;
                let logits = model.backend.mask_fill_logits(&texts, prefix)?.detach();
                let dist = candle_nn::ops::softmax_last_dim(&logits.to_dtype(DType::F64)?)?.to_vec2::<f64>()?;
                for arg_rows in dist.chunks(c) {
                    let mut row = Vec::with_capacity(c);
                    for d in arg_rows {
                        let s = score_binary_mask(d, &tokens)?;
                        low_confidence += usize::from(s.low_confidence);
                        row.push(u8::from(s.probability > threshold));
                    }
                    rows.push(row);
                }
            }
        }
        TemplateMode::Bca | TemplateMode::Oa | TemplateMode::Cot => {
            for arg in &args {
                let texts = render_dataset(&model.template, &[*arg], taxonomy, &all, knowledge)?;
                let mut row = Vec::with_capacity(c);
                for (text, name) in texts.iter().zip(taxonomy.names()) {
                    let answer = model.backend.generate(text, options.max_new_tokens, true, prefix)?;
                    let parsed = match model.template.mode {
                        TemplateMode::Oa => parse_open_answer(&answer, verbalizer, name),
                        _ => parse_binary_answer(&answer, verbalizer),
                    };
                    let positive = match parsed {
                        Ok(p) => p,
                        Err(Error::Undecided(_)) => {
                            undecided += 1;
                            false
                        }
                        Err(e) => return Err(e),
                    };
                    row.push(u8::from(positive));
                }
                rows.push(row);
            }
        }
    }
    let prediction = LabelMatrix::new(dataset.labels().row_ids().to_vec(), rows, c)?;
    let result = metrics::score(&prediction, dataset.labels())?;
    log::info!(
        "{} evaluation: macro F1 {:.3}, {undecided} undecided, {low_confidence} low-confidence",
        model.template.mode,
        result.macro_f1
    );
    Ok(PromptEvaluation {
        prediction,
        result,
        undecided,
        low_confidence,
    })
}

//! Classifier fine-tuning: heads, layer-wise learning rates and the
//! BCE / contrastive training loop.

mod heads;
mod optim;

use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_input, Argument, Dataset, InputStyle, LabelMatrix};
use crate::encoder::{pool, LanguageBackend, PoolStrategy};
use crate::error::{Error, Result};
use crate::losses::{bce_multilabel, cl_loss, combine_tensors, LossConfig};
use crate::metrics;

pub use heads::{forward_heads, ClassifierHead, HeadConfig, HeadVariant};
pub use optim::{build_param_groups, GroupOptimizer, LrSchedule, ParamGroup, Scheduler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClStrategy {
    #[default]
    None,
    /// Contrastive-only phase on the encoder, then BCE fine-tuning.
    Pretrain,
    /// Contrastive term mixed into every BCE step.
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// May be fractional; total steps are `ceil(epochs * ceil(N / B))`.
    pub epochs: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub warmup_ratio: f64,
    pub scheduler: Scheduler,
    pub trainable_top_layers: usize,
    pub seed: u64,
    pub threshold: f64,
    pub cl_strategy: ClStrategy,
    /// Length of the contrastive-only phase under [`ClStrategy::Pretrain`].
    pub pretrain_epochs: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub pooling: PoolStrategy,
    pub input_style: InputStyle,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 3.0,
            lr: 2e-5,
            lr_decay: 0.97,
            warmup_ratio: 0.1,
            scheduler: Scheduler::Cosine,
            trainable_top_layers: 8,
            seed: 0,
            threshold: 0.5,
            cl_strategy: ClStrategy::None,
            pretrain_epochs: 1.0,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            pooling: PoolStrategy::ClsLast,
            input_style: InputStyle::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("train.{field}"),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs.is_nan() || self.epochs <= 0.0 {
            return bad("epochs", "must be positive");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr", "must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio", "must lie in [0, 1)");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        if self.cl_strategy == ClStrategy::Pretrain && (self.pretrain_epochs.is_nan() || self.pretrain_epochs <= 0.0) {
            return bad("pretrain_epochs", "must be positive");
        }
        Ok(())
    }

    pub fn steps_for(&self, epochs: f64, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size);
        (epochs * per_epoch as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
    Prompt,
}

/// One line of a training history: a step loss or an evaluation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub phase: Phase,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.phase == phase)
            .filter_map(|r| r.loss)
            .collect()
    }

    /// Writes one JSON record per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(TrainHistory { records })
    }
}

/// An encoder plus classification head, ready to score arguments.
pub struct Classifier<'a> {
    pub backend: &'a dyn LanguageBackend,
    pub head: ClassifierHead,
    pub pooling: PoolStrategy,
    pub input_style: InputStyle,
}

impl Classifier<'_> {
    fn pooled(&self, arguments: &[&Argument]) -> Result<Tensor> {
        let texts: Vec<String> = arguments.iter().map(|a| render_input(a, &self.input_style)).collect();
        let encoded = self.backend.encode(&texts, None)?;
        if !encoded.truncated.is_empty() {
            log::debug!("{} inputs truncated", encoded.truncated.len());
        }
        pool(&encoded, self.pooling)
    }

    pub fn logits(&self, arguments: &[&Argument]) -> Result<Tensor> {
        self.head.forward(&self.pooled(arguments)?)
    }
}

/// Thresholded labels plus the sigmoid scores they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: LabelMatrix,
    pub scores: Vec<Vec<f64>>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Label is 1 iff `sigmoid(logit) > threshold` (strict).
pub fn threshold_scores(ids: Vec<String>, scores: Vec<Vec<f64>>, threshold: f64) -> Result<Prediction> {
    let num_labels = scores.first().map_or(0, Vec::len);
    let rows = scores
        .iter()
        .map(|r| r.iter().map(|&p| u8::from(p > threshold)).collect())
        .collect();
    Ok(Prediction {
        labels: LabelMatrix::new(ids, rows, num_labels)?,
        scores,
    })
}

pub fn predict(
    classifier: &Classifier<'_>,
    dataset: &Dataset,
    threshold: f64,
    batch_size: usize,
) -> Result<Prediction> {
    let args: Vec<&Argument> = dataset.arguments().iter().collect();
    let mut scores = Vec::with_capacity(args.len());
    for chunk in args.chunks(batch_size.max(1)) {
        let logits = classifier
            .logits(chunk)?
            .detach()
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        scores.extend(
            logits
                .into_iter()
                .map(|r| r.into_iter().map(sigmoid).collect::<Vec<_>>()),
        );
    }
    let ids = dataset.labels().row_ids().to_vec();
    threshold_scores(ids, scores, threshold)
}

pub struct TrainOutcome {
    pub head: ClassifierHead,
    pub history: TrainHistory,
}

/// Per-epoch shuffled batches covering `total_steps` steps.
pub(crate) fn batch_plan(n: usize, batch_size: usize, total_steps: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut plan = Vec::with_capacity(total_steps);
    while plan.len() < total_steps {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if plan.len() == total_steps {
                break;
            }
            plan.push(chunk.to_vec());
        }
    }
    plan
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Fine-tunes `backend` (in place, top layers only) and a fresh head on `dataset`.
///
/// Validation macro F1 is recorded at every epoch boundary when `validation` is given.
pub fn train(
    dataset: &Dataset,
    backend: &dyn LanguageBackend,
    head_config: &HeadConfig,
    config: &TrainConfig,
    loss_config: &LossConfig,
    validation: Option<&Dataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    loss_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if head_config.input_dim != backend.capabilities().hidden_size {
        return Err(Error::contract(format!(
            "head input {} does not match backend hidden size {}",
            head_config.input_dim,
            backend.capabilities().hidden_size
        )));
    }
    if head_config.num_labels != dataset.labels().num_labels() {
        return Err(Error::contract("head label count does not match dataset"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let head = ClassifierHead::new(head_config.clone(), &mut rng, backend.device())?;
    let classifier = Classifier {
        backend,
        head,
        pooling: config.pooling,
        input_style: config.input_style.clone(),
    };
    let groups = build_param_groups(backend, config.lr, config.lr_decay, config.trainable_top_layers)?;
    let resolve = |prefix: &str| {
        let mut vars = backend.params().vars_with_prefix(prefix);
        vars.extend(classifier.head.params().vars_with_prefix(prefix));
        vars
    };
    let mut history = TrainHistory::default();
    let n = dataset.len();
    let args = dataset.arguments();
    let labels = dataset.labels();

    if config.cl_strategy == ClStrategy::Pretrain {
        // Heads stay untouched: only encoder groups are optimised.
        let encoder_groups: Vec<ParamGroup> = groups.iter().filter(|g| g.name != "heads").cloned().collect();
        let mut opt = GroupOptimizer::new(&encoder_groups, config.weight_decay, config.max_grad_norm, resolve)?;
        let steps = config.steps_for(config.pretrain_epochs, n);
        let schedule = LrSchedule::new(config.scheduler, steps, config.warmup_ratio);
        let plan = batch_plan(n, config.batch_size, steps, &mut rng);
        for (step, batch) in plan.iter().enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let batch_args: Vec<&Argument> = batch.iter().map(|&i| &args[i]).collect();
            let pooled = classifier.pooled(&batch_args)?;
            let cl = cl_loss(&pooled, &labels.select(batch), loss_config)?;
            let factor = schedule.factor(step);
            if !cl.no_positives() {
                let mut grads = cl.loss.backward()?;
                opt.step(&mut grads, factor)?;
            }
            history.records.push(HistoryRecord {
                phase: Phase::Pretrain,
                step,
                loss: Some(scalar(&cl.loss)?),
                lr: encoder_groups.iter().map(|g| g.lr).fold(0.0, f64::max) * factor,
                split: None,
                f1: None,
            });
        }
    }

    let mut opt = GroupOptimizer::new(&groups, config.weight_decay, config.max_grad_norm, resolve)?;
    let steps = config.steps_for(config.epochs, n);
    let per_epoch = n.div_ceil(config.batch_size);
    let schedule = LrSchedule::new(config.scheduler, steps, config.warmup_ratio);
    let plan = batch_plan(n, config.batch_size, steps, &mut rng);
    let targets_all = labels.to_tensor(DType::F32, backend.device())?;
    for (step, batch) in plan.iter().enumerate() {
        let batch_args: Vec<&Argument> = batch.iter().map(|&i| &args[i]).collect();
        let pooled = classifier.pooled(&batch_args)?;
        let logits = classifier.head.forward(&pooled)?;
        let index = Tensor::new(
            batch.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(),
            backend.device(),
        )?;
        let targets = targets_all.index_select(&index, 0)?;
        let bce = bce_multilabel(&logits, &targets)?;
        let loss = match config.cl_strategy {
            ClStrategy::Auxiliary => {
                let cl = if batch.len() >= 2 {
                    cl_loss(&pooled, &labels.select(batch), loss_config)?.loss
                } else {
                    Tensor::zeros((), bce.dtype(), bce.device())?
                };
                combine_tensors(&bce, &cl, loss_config.cl_weight)?
            }
            ClStrategy::None | ClStrategy::Pretrain => bce,
        };
        let factor = schedule.factor(step);
        let mut grads = loss.backward()?;
        opt.step(&mut grads, factor)?;
        history.records.push(HistoryRecord {
            phase: Phase::Finetune,
            step,
            loss: Some(scalar(&loss)?),
            lr: config.lr * factor,
            split: None,
            f1: None,
        });
        let epoch_end = (step + 1) % per_epoch == 0 || step + 1 == steps;
        if let (Some(val), true) = (validation, epoch_end) {
            let pred = predict(&classifier, val, config.threshold, config.batch_size.max(16))?;
            let result = metrics::score(&pred.labels, val.labels())?;
            history.records.push(HistoryRecord {
                phase: Phase::Finetune,
                step,
                loss: None,
                lr: config.lr * factor,
                split: Some("validation".into()),
                f1: Some(result.macro_f1),
            });
        }
    }
    Ok(TrainOutcome {
        head: classifier.head,
        history,
    })
}

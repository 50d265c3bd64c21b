//! The experiment commands. Each writes its artifacts under
//! `<output_dir>/<run hash>/` only after its work has succeeded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use hvd_core::checkpoint::{Checkpoint, CheckpointKind, MANIFEST_FILE};
use hvd_core::corpus::{load_dataset, sample_few_shot, JoinReport};
use hvd_core::encoder::resolve_backend;
use hvd_core::llm::{evaluate_llm, write_exchange_log, ChatClient, HttpChatClient, MockClient};
use hvd_core::metrics::{score, write_run_file, Provenance};
use hvd_core::prompting::{evaluate_prompted, prompt_tune, PromptedModel, TemplateSet, Verbalizer};
use hvd_core::training::{predict, train, Classifier, HeadConfig, TrainHistory};
use hvd_core::{Dataset, Error, Result, RunResult, ValueTaxonomy};
use serde::{Deserialize, Serialize};

use crate::config::{run_hash, ExperimentConfig, Provider};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const RESULT_FILE: &str = "result.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const EXCHANGES_FILE: &str = "exchanges.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const EVAL_BATCH: usize = 16;

/// Everything needed to re-derive a run's results, stored as `run.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub run_hash: String,
    pub seed: u64,
    pub backend: String,
    pub code_version: String,
    pub taxonomy_fingerprint: String,
    pub categories: Vec<String>,
    /// Additional inputs that entered the hash, such as a checkpoint manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

/// A run directory reserved for one command invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub hash: String,
    pub dir: PathBuf,
    info: RunInfo,
    snapshot: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

impl Run {
    /// Computes the run hash and refuses an existing directory unless `force`.
    fn reserve(
        config: &ExperimentConfig,
        taxonomy: &ValueTaxonomy,
        command: &str,
        inputs: Vec<String>,
        force: bool,
    ) -> Result<Self> {
        let snapshot = config.snapshot();
        let extra: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let hash = run_hash(command, &snapshot, &extra);
        let dir = config.output_dir.join(&hash);
        if dir.exists() && !force {
            return Err(Error::Integrity(format!(
                "run directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        let info = RunInfo {
            command: command.to_owned(),
            run_hash: hash.clone(),
            seed: config.seed,
            backend: config.backend.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            taxonomy_fingerprint: taxonomy.fingerprint(),
            categories: taxonomy.names().map(str::to_owned).collect(),
            inputs,
        };
        Ok(Run {
            hash,
            dir,
            info,
            snapshot,
        })
    }

    /// Clears any previous contents and writes the config snapshot and run info.
    fn open(&self) -> Result<()> {
        if self.dir.exists() {
            std::fs::remove_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        }
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.dir.join(CONFIG_FILE);
        std::fs::write(&path, &self.snapshot).map_err(io_err(&path))?;
        write_json(&self.dir.join(RUN_FILE), &self.info)
    }

    fn provenance(&self, run_file: Option<PathBuf>) -> Provenance {
        Provenance {
            run_file,
            config_hash: Some(self.hash.clone()),
        }
    }
}

fn load_taxonomy(config: &ExperimentConfig) -> Result<ValueTaxonomy> {
    match &config.corpus.taxonomy {
        Some(path) => ValueTaxonomy::from_path(path),
        None => Ok(ValueTaxonomy::builtin()),
    }
}

fn load_verbalizer(config: &ExperimentConfig, taxonomy: &ValueTaxonomy) -> Result<Verbalizer> {
    let verbalizer = match &config.prompt.verbalizer {
        Some(path) => Verbalizer::from_path(path)?,
        None => Verbalizer::builtin()?,
    };
    verbalizer.check_covers(taxonomy)?;
    Ok(verbalizer)
}

fn load_train(config: &ExperimentConfig, taxonomy: &ValueTaxonomy) -> Result<(Dataset, JoinReport)> {
    let (dataset, report) = load_dataset(&config.corpus.arguments, &config.corpus.labels, taxonomy)?;
    match config.corpus.few_shot {
        Some(k) => Ok((sample_few_shot(&dataset, k, config.seed)?.dataset, report)),
        None => Ok((dataset, report)),
    }
}

fn load_validation(config: &ExperimentConfig, taxonomy: &ValueTaxonomy) -> Result<Option<(Dataset, JoinReport)>> {
    match (&config.corpus.validation_arguments, &config.corpus.validation_labels) {
        (Some(args), Some(labels)) => load_dataset(args, labels, taxonomy).map(Some),
        _ => Ok(None),
    }
}

/// The split scored by `eval` and `llm-eval`: validation when configured, else training.
fn load_eval_split(config: &ExperimentConfig, taxonomy: &ValueTaxonomy) -> Result<Dataset> {
    match load_validation(config, taxonomy)? {
        Some((dataset, _)) => Ok(dataset),
        None => Ok(load_dataset(&config.corpus.arguments, &config.corpus.labels, taxonomy)?.0),
    }
}

/// Writes predictions and the scored result; returns the result.
fn write_scored(
    run: &Run,
    prediction: &hvd_core::LabelMatrix,
    gold: &Dataset,
    taxonomy: &ValueTaxonomy,
) -> Result<RunResult> {
    let run_file = run.dir.join(PREDICTIONS_FILE);
    write_run_file(prediction, &run_file, taxonomy)?;
    let result = score(prediction, gold.labels())?.with_provenance(run.provenance(Some(run_file)));
    write_json(&run.dir.join(RESULT_FILE), &result)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub arguments: usize,
    /// Arguments dropped for lacking a label row.
    pub dropped: usize,
    /// Positive count per category, in taxonomy order.
    pub label_counts: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub splits: Vec<SplitSummary>,
}

impl CorpusSummary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for split in &self.splits {
            out.push_str(&format!(
                "{}: {} arguments ({} dropped)\n",
                split.split, split.arguments, split.dropped
            ));
            for (name, count) in &split.label_counts {
                out.push_str(&format!("  {name:<28} {count}\n"));
            }
        }
        out
    }
}

fn summarize(split: &str, dataset: &Dataset, report: JoinReport, taxonomy: &ValueTaxonomy) -> SplitSummary {
    SplitSummary {
        split: split.to_owned(),
        arguments: dataset.len(),
        dropped: report.dropped,
        label_counts: taxonomy
            .names()
            .map(str::to_owned)
            .zip(dataset.labels().column_counts())
            .collect(),
    }
}

pub struct IngestOutcome {
    pub run: Run,
    pub summary: CorpusSummary,
}

pub fn cmd_ingest(config: &ExperimentConfig, force: bool) -> Result<IngestOutcome> {
    let taxonomy = load_taxonomy(config)?;
    let run = Run::reserve(config, &taxonomy, "ingest", Vec::new(), force)?;
    let (train, report) = load_train(config, &taxonomy)?;
    let mut splits = vec![summarize("train", &train, report, &taxonomy)];
    if let Some((validation, report)) = load_validation(config, &taxonomy)? {
        splits.push(summarize("validation", &validation, report, &taxonomy));
    }
    let summary = CorpusSummary { splits };
    run.open()?;
    write_json(&run.dir.join(SUMMARY_FILE), &summary)?;
    Ok(IngestOutcome { run, summary })
}

pub struct TrainRun {
    pub run: Run,
    pub history: TrainHistory,
    pub validation: Option<RunResult>,
}

pub fn cmd_train(config: &ExperimentConfig, force: bool) -> Result<TrainRun> {
    let taxonomy = load_taxonomy(config)?;
    let run = Run::reserve(config, &taxonomy, "train", Vec::new(), force)?;
    let backend = resolve_backend(&config.backend)?;
    let (dataset, _) = load_train(config, &taxonomy)?;
    let validation = load_validation(config, &taxonomy)?.map(|(d, _)| d);
    let head_config = HeadConfig {
        variant: config.head.variant,
        input_dim: backend.capabilities().hidden_size,
        num_labels: taxonomy.len(),
    };
    let outcome = train(
        &dataset,
        backend.as_ref(),
        &head_config,
        &config.train,
        &config.loss,
        validation.as_ref(),
    )?;
    let checkpoint = Checkpoint::finetuned(backend.as_ref(), &taxonomy, &config.train, &outcome)?;

    run.open()?;
    outcome.history.write_jsonl(run.dir.join(HISTORY_FILE))?;
    checkpoint.save(run.dir.join(CHECKPOINT_DIR))?;
    let scored = match &validation {
        Some(gold) => {
            let classifier = Classifier {
                backend: backend.as_ref(),
                head: outcome.head.clone(),
                pooling: config.train.pooling,
                input_style: config.train.input_style.clone(),
            };
            let prediction = predict(&classifier, gold, config.train.threshold, EVAL_BATCH)?;
            Some(write_scored(&run, &prediction.labels, gold, &taxonomy)?)
        }
        None => None,
    };
    Ok(TrainRun {
        run,
        history: outcome.history,
        validation: scored,
    })
}

pub fn cmd_prompt_tune(config: &ExperimentConfig, force: bool) -> Result<TrainRun> {
    let taxonomy = load_taxonomy(config)?;
    let verbalizer = load_verbalizer(config, &taxonomy)?;
    let templates = match &config.prompt.templates {
        Some(path) => TemplateSet::from_path(path)?,
        None => TemplateSet::builtin()?,
    };
    let mut template = templates.get(config.prompt.mode)?.clone();
    if let Some(length) = config.prompt.soft_prompt_length {
        template.soft_prompt_length = length;
    }
    template.validate()?;
    let options = config.prompt.options();
    let run = Run::reserve(config, &taxonomy, "prompt-tune", Vec::new(), force)?;
    let backend = resolve_backend(&config.backend)?;
    let (dataset, _) = load_train(config, &taxonomy)?;
    let validation = load_validation(config, &taxonomy)?.map(|(d, _)| d);
    let tuned = prompt_tune(
        &dataset,
        backend.as_ref(),
        &template,
        &verbalizer,
        &taxonomy,
        &config.train,
        &options,
    )?;
    let checkpoint = Checkpoint::prompt_tuned(backend.as_ref(), &taxonomy, &config.train, &options, &tuned)?;

    run.open()?;
    tuned.history.write_jsonl(run.dir.join(HISTORY_FILE))?;
    checkpoint.save(run.dir.join(CHECKPOINT_DIR))?;
    let scored = match &validation {
        Some(gold) => {
            let model = PromptedModel {
                backend: backend.as_ref(),
                template: tuned.template.clone(),
                soft_prompt: tuned.soft_prompt.clone(),
                head: tuned.head.clone(),
                pooling: config.train.pooling,
            };
            let evaluation = evaluate_prompted(
                &model,
                gold,
                &taxonomy,
                &verbalizer,
                &options,
                config.train.threshold,
                EVAL_BATCH,
            )?;
            Some(write_scored(&run, &evaluation.prediction, gold, &taxonomy)?)
        }
        None => None,
    };
    Ok(TrainRun {
        run,
        history: tuned.history,
        validation: scored,
    })
}

pub struct EvalOutcome {
    pub run: Run,
    pub result: RunResult,
}

pub fn cmd_eval(config: &ExperimentConfig, checkpoint_dir: &Path, force: bool) -> Result<EvalOutcome> {
    let taxonomy = load_taxonomy(config)?;
    let checkpoint = Checkpoint::load(checkpoint_dir, &Device::Cpu)?;
    checkpoint.check_taxonomy(&taxonomy)?;
    let manifest = &checkpoint.manifest;
    if manifest.backend_id != config.backend {
        return Err(Error::Integrity(format!(
            "checkpoint was trained on backend `{}`, configuration uses `{}`",
            manifest.backend_id, config.backend
        )));
    }
    let verbalizer = match manifest.kind {
        CheckpointKind::Prompt => Some(load_verbalizer(config, &taxonomy)?),
        CheckpointKind::Finetune => None,
    };
    let manifest_text = serde_json::to_string(manifest)?;
    let run = Run::reserve(config, &taxonomy, "eval", vec![manifest_text], force)?;
    let gold = load_eval_split(config, &taxonomy)?;
    let backend = checkpoint.restore_backend()?;
    let threshold = manifest.train.threshold;
    let prediction = match manifest.kind {
        CheckpointKind::Finetune => {
            let head = checkpoint
                .head
                .clone()
                .ok_or_else(|| Error::Integrity(format!("{MANIFEST_FILE} declares a head that is missing")))?;
            let classifier = Classifier {
                backend: backend.as_ref(),
                head,
                pooling: manifest.train.pooling,
                input_style: manifest.train.input_style.clone(),
            };
            predict(&classifier, &gold, threshold, EVAL_BATCH)?.labels
        }
        CheckpointKind::Prompt => {
            let verbalizer = verbalizer.as_ref().expect("loaded for prompt checkpoints");
            let template = manifest
                .template
                .clone()
                .ok_or_else(|| Error::Integrity("prompt checkpoint has no template".into()))?;
            let model = PromptedModel {
                backend: backend.as_ref(),
                template,
                soft_prompt: checkpoint.soft_prompt.clone(),
                head: checkpoint.head.clone(),
                pooling: manifest.train.pooling,
            };
            let options = manifest.prompt.clone().unwrap_or_default();
            evaluate_prompted(&model, &gold, &taxonomy, verbalizer, &options, threshold, EVAL_BATCH)?.prediction
        }
    };
    run.open()?;
    let result = write_scored(&run, &prediction, &gold, &taxonomy)?;
    Ok(EvalOutcome { run, result })
}

pub struct LlmOutcome {
    pub run: Run,
    pub result: RunResult,
    pub failed: usize,
    pub client_calls: usize,
}

fn build_client(config: &ExperimentConfig) -> Result<Box<dyn ChatClient>> {
    let llm = &config.llm;
    match llm.provider {
        Provider::OpenaiCompatible => Ok(Box::new(HttpChatClient::new(llm.http_config()?)?)),
        Provider::Mock => {
            let path = llm.mock_responses.as_ref().ok_or_else(|| Error::Config {
                field: "llm.mock_responses".into(),
                message: "required by the mock provider".into(),
            })?;
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let responses: BTreeMap<String, String> = serde_json::from_str(&text)?;
            let client = responses
                .into_iter()
                .fold(MockClient::new(&llm.model), |client, (needle, response)| {
                    client.respond(needle, response)
                });
            Ok(Box::new(client))
        }
    }
}

pub fn cmd_llm_eval(config: &ExperimentConfig, force: bool) -> Result<LlmOutcome> {
    let taxonomy = load_taxonomy(config)?;
    let client = build_client(config)?;
    let run = Run::reserve(config, &taxonomy, "llm-eval", Vec::new(), force)?;
    let gold = load_eval_split(config, &taxonomy)?;
    let evaluation = evaluate_llm(&gold, client.as_ref(), &taxonomy, &config.llm.options(config.seed))?;
    run.open()?;
    write_exchange_log(&evaluation.exchanges, run.dir.join(EXCHANGES_FILE))?;
    let sampled: Vec<usize> = evaluation
        .prediction
        .row_ids()
        .iter()
        .map(|id| {
            gold.ids()
                .position(|g| g == id)
                .expect("sampled ids come from the split")
        })
        .collect();
    let result = write_scored(&run, &evaluation.prediction, &gold.select(&sampled), &taxonomy)?;
    Ok(LlmOutcome {
        run,
        result,
        failed: evaluation.failed,
        client_calls: evaluation.client_calls,
    })
}

/// One scored run as listed by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub categories: Option<Vec<String>>,
    pub result: RunResult,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a run directory or a bare `result.json`.
pub fn load_report_row(path: &Path) -> Result<ReportRow> {
    let (result_path, info_path) = if path.is_dir() {
        (path.join(RESULT_FILE), path.join(RUN_FILE))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_owned(), dir.join(RUN_FILE))
    };
    let result: RunResult = read_json(&result_path)?;
    let info: Option<RunInfo> = if info_path.exists() {
        Some(read_json(&info_path)?)
    } else {
        None
    };
    let label = match &info {
        Some(info) => format!("{} {}", info.command, info.run_hash),
        None => path.display().to_string(),
    };
    Ok(ReportRow {
        label,
        categories: info.map(|i| i.categories),
        result,
    })
}

/// A markdown grid: one row per run, an `All` column, then one column per category.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Contract("report needs at least one run".into()));
    }
    let rows = paths.iter().map(|p| load_report_row(p)).collect::<Result<Vec<_>>>()?;
    let width = rows[0].result.per_label.len();
    if let Some(odd) = rows.iter().find(|r| r.result.per_label.len() != width) {
        return Err(Error::Integrity(format!(
            "`{}` scores {} categories, expected {width}",
            odd.label,
            odd.result.per_label.len()
        )));
    }
    let builtin = ValueTaxonomy::builtin();
    let names: Vec<String> = rows
        .iter()
        .find_map(|r| r.categories.clone())
        .or_else(|| (builtin.len() == width).then(|| builtin.names().map(str::to_owned).collect()))
        .unwrap_or_else(|| (1..=width).map(|i| format!("L{i}")).collect());
    if let Some(odd) = rows.iter().find(|r| r.categories.as_ref().is_some_and(|c| *c != names)) {
        return Err(Error::Integrity(format!("`{}` uses a different taxonomy", odd.label)));
    }

    let mut out = String::new();
    let header: Vec<&str> = ["Run", "All"]
        .into_iter()
        .chain(names.iter().map(String::as_str))
        .collect();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in &rows {
        let cells: Vec<String> = std::iter::once(row.label.clone())
            .chain(std::iter::once(format!("{:.2}", row.result.macro_f1)))
            .chain(row.result.per_label.iter().map(|s| format!("{:.2}", s.f1)))
            .collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    Ok(out)
}

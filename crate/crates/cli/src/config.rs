//! Experiment configuration: a TOML file naming the corpus, backend, training,
//! prompting and LLM settings for one run.

use std::path::{Path, PathBuf};
use std::time::Duration;

use hvd_core::llm::{HttpClientConfig, LlmOptions};
use hvd_core::losses::LossConfig;
use hvd_core::prompting::{PromptOptions, TemplateMode};
use hvd_core::training::{HeadVariant, TrainConfig};
use hvd_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Applies to training, sampling and LLM subset selection alike.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_backend")]
    pub backend: String,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub head: HeadSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub llm: LlmSection,
}

fn default_backend() -> String {
    "tiny_test".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub arguments: PathBuf,
    pub labels: PathBuf,
    pub validation_arguments: Option<PathBuf>,
    pub validation_labels: Option<PathBuf>,
    /// Taxonomy TOML; the bundled 20-category taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    /// Up to `k` positives per category from the training split.
    pub few_shot: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub variant: HeadVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub mode: TemplateMode,
    /// Template TOML; the bundled templates when absent.
    pub templates: Option<PathBuf>,
    /// Verbalizer TOML; the bundled verbalizer when absent.
    pub verbalizer: Option<PathBuf>,
    /// Overrides the template's soft prompt length.
    pub soft_prompt_length: Option<usize>,
    pub categories: Vec<String>,
    pub use_knowledge: bool,
    pub max_new_tokens: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        let options = PromptOptions::default();
        PromptSection {
            mode: TemplateMode::Mbc,
            templates: None,
            verbalizer: None,
            soft_prompt_length: None,
            categories: options.categories,
            use_knowledge: options.use_knowledge,
            max_new_tokens: options.max_new_tokens,
        }
    }
}

impl PromptSection {
    pub fn options(&self) -> PromptOptions {
        PromptOptions {
            categories: self.categories.clone(),
            use_knowledge: self.use_knowledge,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    #[default]
    OpenaiCompatible,
    /// Canned responses from `mock_responses`; for offline runs.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub provider: Provider,
    pub model: String,
    /// May reference an environment variable as `${NAME}`.
    pub endpoint: String,
    /// May reference an environment variable as `${NAME}`.
    pub api_key: Option<String>,
    pub max_tokens: usize,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub fraction: f64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    /// JSON object mapping a prompt substring to its canned response.
    pub mock_responses: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        let options = LlmOptions::default();
        LlmSection {
            provider: Provider::default(),
            model: "gpt-3.5-turbo".into(),
            endpoint: "${HVD_LLM_ENDPOINT}".into(),
            api_key: Some("${HVD_LLM_API_KEY}".into()),
            max_tokens: 1024,
            temperature: 0.0,
            timeout_secs: 60,
            fraction: options.fraction,
            max_retries: options.max_retries,
            backoff_ms: options.backoff_ms,
            concurrency: options.concurrency,
            cache_dir: None,
            mock_responses: None,
        }
    }
}

impl LlmSection {
    pub fn options(&self, seed: u64) -> LlmOptions {
        LlmOptions {
            fraction: self.fraction,
            seed,
            max_retries: self.max_retries,
            backoff_ms: self.backoff_ms,
            concurrency: self.concurrency,
            cache_dir: self.cache_dir.clone(),
        }
    }

    /// Client settings with credentials resolved from the environment.
    pub fn http_config(&self) -> Result<HttpClientConfig> {
        Ok(HttpClientConfig {
            endpoint: interpolate(&self.endpoint, "llm.endpoint")?,
            api_key: self
                .api_key
                .as_deref()
                .map(|k| interpolate(k, "llm.api_key"))
                .transpose()?,
            model: self.model.clone(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            timeout: Duration::from_secs(self.timeout_secs),
        })
    }
}

fn config_error(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// Replaces every `${NAME}` in `raw` with the value of environment variable `NAME`.
pub fn interpolate(raw: &str, field: &str) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| config_error(field, "unterminated `${`"))?;
        let name = &after[..end];
        if name.is_empty() {
            return Err(config_error(field, "empty variable name"));
        }
        let value = std::env::var(name)
            .map_err(|_| config_error(field, format!("environment variable `{name}` is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Interpolation is reserved for the credential fields.
const INTERPOLATED: [&str; 2] = ["llm.endpoint", "llm.api_key"];

fn reject_stray_interpolation(value: &toml::Value, path: &str) -> Result<()> {
    match value {
        toml::Value::String(s) if s.contains("${") && !INTERPOLATED.contains(&path) => Err(config_error(
            path,
            "environment interpolation is only allowed in llm.endpoint and llm.api_key",
        )),
        toml::Value::Table(table) => table.iter().try_for_each(|(key, v)| {
            let child = if path.is_empty() {
                key.clone()
            } else {
                format!("{path}.{key}")
            };
            reject_stray_interpolation(v, &child)
        }),
        toml::Value::Array(items) => items
            .iter()
            .enumerate()
            .try_for_each(|(i, v)| reject_stray_interpolation(v, &format!("{path}[{i}]"))),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| config_error("<root>", e.message()))?;
        reject_stray_interpolation(&value, "")?;
        let mut config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            config_error(field, e.into_inner().to_string())
        })?;
        config.apply_seed(config.seed);
        config.validate()?;
        Ok(config)
    }

    /// Loads `path`, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.arguments);
        fix(&mut self.corpus.labels);
        for p in [
            &mut self.corpus.validation_arguments,
            &mut self.corpus.validation_labels,
            &mut self.corpus.taxonomy,
            &mut self.prompt.templates,
            &mut self.prompt.verbalizer,
            &mut self.llm.cache_dir,
            &mut self.llm.mock_responses,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend.trim().is_empty() {
            return Err(config_error("backend", "must not be empty"));
        }
        if self.corpus.validation_arguments.is_some() != self.corpus.validation_labels.is_some() {
            return Err(config_error(
                "corpus.validation_labels",
                "validation arguments and labels must be given together",
            ));
        }
        if self.corpus.few_shot == Some(0) {
            return Err(config_error("corpus.few_shot", "must be at least 1"));
        }
        self.train.validate()?;
        self.loss.validate()?;
        self.llm.options(self.seed).validate()?;
        if self.llm.provider == Provider::Mock && self.llm.mock_responses.is_none() {
            return Err(config_error("llm.mock_responses", "required by the mock provider"));
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration; credentials stay as `${NAME}`.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}

/// Identifies a run: the command plus its configuration and any extra inputs.
pub fn run_hash(command: &str, snapshot: &str, extra: &[&str]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update([0]);
    hasher.update(snapshot.as_bytes());
    for part in extra {
        hasher.update([0]);
        hasher.update(part.as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

//! Chain-of-thought evaluation of chat LLMs with retries, bounded
//! concurrency and a content-addressed response cache.

mod client;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{sample_fraction, Argument, Dataset, LabelMatrix, ValueTaxonomy};
use crate::error::{Error, Result};
use crate::metrics::{self, RunResult};

pub use client::{ChatClient, ChatMessage, ClientCapabilities, HttpChatClient, HttpClientConfig, MockClient, Role};

/// Heading that introduces the answer grammar in [`build_cot_prompt`].
pub const ANSWER_SECTION: &str = "Final answer:";

/// Step-by-step instruction ending in one `<category name>: YES|NO` line per category.
pub fn build_cot_prompt(argument: &Argument, taxonomy: &ValueTaxonomy) -> String {
    let mut prompt = String::new();
    prompt.push_str("Decide which human values the premise of an argument appeals to.\n\n");
    prompt.push_str(&format!("Premise: {}\n", argument.premise));
    prompt.push_str(&format!("Conclusion: {}\n", argument.conclusion));
    prompt.push_str(&format!(
        "Stance: the premise is {} the conclusion.\n\n",
        argument.stance.as_word()
    ));
    prompt.push_str("Value definitions:\n");
    for c in taxonomy.categories() {
        prompt.push_str(&format!("- {}: {}\n", c.name, c.description));
    }
    prompt.push_str(
        "\nLet's think step by step.\n\
         1. Restate the premise, the conclusion and the stance in your own words.\n\
         2. Reason about which of the values the premise appeals to.\n\
         3. Finish with the section below, one line per value in this order, \
         writing YES or NO after each colon and nothing else.\n\n",
    );
    prompt.push_str(ANSWER_SECTION);
    prompt.push('\n');
    for name in taxonomy.names() {
        prompt.push_str(&format!("{name}: YES|NO\n"));
    }
    prompt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotStatus {
    Ok,
    /// Some categories had no answer line and default to NO.
    ParseFallback,
    Failed,
}

fn normalise(name: &str) -> String {
    name.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Reads `<category name>: YES|NO` lines; the last line per category wins.
pub fn parse_cot_response(text: &str, taxonomy: &ValueTaxonomy) -> (Vec<u8>, CotStatus) {
    let c = taxonomy.len();
    if text.trim().is_empty() {
        return (vec![0; c], CotStatus::Failed);
    }
    let names: Vec<String> = taxonomy.names().map(normalise).collect();
    let mut answers: Vec<Option<u8>> = vec![None; c];
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '#', '>', ' ']);
        let Some((name, verdict)) = line.rsplit_once(':') else {
            continue;
        };
        let verdict = verdict
            .trim()
            .trim_matches(|ch: char| !ch.is_alphanumeric())
            .to_ascii_uppercase();
        let value = match verdict.as_str() {
            "YES" => 1,
            "NO" => 0,
            _ => continue,
        };
        let name = normalise(name.trim_matches(|ch: char| ch == '*' || ch == '`' || ch.is_whitespace()));
        if let Some(j) = names.iter().position(|n| *n == name) {
            answers[j] = Some(value);
        }
    }
    let status = if answers.iter().all(Option::is_some) {
        CotStatus::Ok
    } else {
        CotStatus::ParseFallback
    };
    (answers.into_iter().map(|a| a.unwrap_or(0)).collect(), status)
}

/// One prompt/response round for one argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotExchange {
    pub argument_id: String,
    pub prompt: String,
    pub raw_response: String,
    pub parsed: Vec<u8>,
    pub status: CotStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub attempts: usize,
    pub cached: bool,
}

/// Responses stored as files named by `sha256(model || 0x00 || prompt)`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    response: String,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    pub fn key(model: &str, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, model: &str, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.json", Self::key(model, prompt)))
    }

    pub fn get(&self, model: &str, prompt: &str) -> Result<Option<String>> {
        let path = self.path(model, prompt);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str::<CacheEntry>(&text)?.response)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, model: &str, prompt: &str, response: &str) -> Result<()> {
        let path = self.path(model, prompt);
        let entry = CacheEntry {
            model: model.to_owned(),
            response: response.to_owned(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&entry)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmOptions {
    /// Share of the dataset to query, in (0, 1].
    pub fraction: f64,
    pub seed: u64,
    pub max_retries: usize,
    /// Delay before the first retry; doubled on each further retry.
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmOptions {
    fn default() -> Self {
        LlmOptions {
            fraction: 0.05,
            seed: 0,
            max_retries: 3,
            backoff_ms: 500,
            concurrency: 4,
            cache_dir: None,
        }
    }
}

impl LlmOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config {
                field: "llm.fraction".into(),
                message: "must lie in (0, 1]".into(),
            });
        }
        if self.concurrency == 0 {
            return Err(Error::Config {
                field: "llm.concurrency".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LlmEvaluation {
    pub result: RunResult,
    pub prediction: LabelMatrix,
    /// In dataset order.
    pub exchanges: Vec<CotExchange>,
    pub failed: usize,
    pub client_calls: usize,
}

fn query(
    client: &dyn ChatClient,
    cache: Option<&ResponseCache>,
    cache_lock: &Mutex<()>,
    prompt: &str,
    options: &LlmOptions,
    calls: &AtomicUsize,
) -> (Result<String>, usize, bool) {
    let model = &client.capabilities().model_name;
    if let Some(cache) = cache {
        match cache.get(model, prompt) {
            Ok(Some(hit)) => return (Ok(hit), 0, true),
            Ok(None) => {}
            Err(e) => log::warn!("unreadable cache entry: {e}"),
        }
    }
    let messages = [ChatMessage::user(prompt)];
    let mut last = Error::Client("no attempt made".into());
    for attempt in 0..=options.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(options.backoff_ms << (attempt - 1)));
        }
        calls.fetch_add(1, Ordering::SeqCst);
        match client.send(&messages) {
            Ok(response) => {
                if let Some(cache) = cache {
                    let _guard = cache_lock.lock().expect("cache lock");
                    if let Err(e) = cache.put(model, prompt, &response) {
                        log::warn!("cache write failed: {e}");
                    }
                }
                return (Ok(response), attempt + 1, false);
            }
            Err(e) => {
                log::debug!("attempt {} failed: {e}", attempt + 1);
                last = e;
            }
        }
    }
    (Err(last), options.max_retries + 1, false)
}

/// Samples `fraction` of `dataset`, queries `client` with a chain-of-thought
/// prompt per argument, and scores the parsed answers.
pub fn evaluate_llm(
    dataset: &Dataset,
    client: &dyn ChatClient,
    taxonomy: &ValueTaxonomy,
    options: &LlmOptions,
) -> Result<LlmEvaluation> {
    options.validate()?;
    let sample = sample_fraction(dataset, options.fraction, options.seed)?;
    let cache = options.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
    let cache_lock = Mutex::new(());
    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let args = sample.arguments();
    let slots: Mutex<Vec<Option<CotExchange>>> = Mutex::new(vec![None; args.len()]);
    log::info!(
        "querying {} on {} of {} arguments",
        client.capabilities().model_name,
        args.len(),
        dataset.len()
    );
    std::thread::scope(|scope| {
        for _ in 0..options.concurrency.min(args.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(arg) = args.get(i) else { break };
                let prompt = build_cot_prompt(arg, taxonomy);
                let (response, attempts, cached) = query(client, cache.as_ref(), &cache_lock, &prompt, options, &calls);
                let exchange = match response {
                    Ok(raw) => {
                        let (parsed, status) = parse_cot_response(&raw, taxonomy);
                        CotExchange {
                            argument_id: arg.id.clone(),
                            prompt,
                            raw_response: raw,
                            parsed,
                            status,
                            error: (status == CotStatus::Failed).then(|| "empty response".to_owned()),
                            attempts,
                            cached,
                        }
                    }
                    Err(e) => CotExchange {
                        argument_id: arg.id.clone(),
                        prompt,
                        raw_response: String::new(),
                        parsed: vec![0; taxonomy.len()],
                        status: CotStatus::Failed,
                        error: Some(e.to_string()),
                        attempts,
                        cached,
                    },
                };
                slots.lock().expect("result lock")[i] = Some(exchange);
            });
        }
    });
    let exchanges: Vec<CotExchange> = slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|e| e.expect("every argument queried"))
        .collect();
    let failed = exchanges.iter().filter(|e| e.status == CotStatus::Failed).count();
    let prediction = LabelMatrix::new(
        exchanges.iter().map(|e| e.argument_id.clone()).collect(),
        exchanges.iter().map(|e| e.parsed.clone()).collect(),
        taxonomy.len(),
    )?;
    let result = metrics::score(&prediction, sample.labels())?;
    Ok(LlmEvaluation {
        result,
        prediction,
        exchanges,
        failed,
        client_calls: calls.into_inner(),
    })
}

/// Writes one JSON exchange per line.
pub fn write_exchange_log(exchanges: &[CotExchange], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in exchanges {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

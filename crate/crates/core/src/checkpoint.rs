//! On-disk checkpoints: trained head or soft-prompt parameters, any tuned
//! backbone layers, and a manifest with everything needed to rebuild them.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ValueTaxonomy;
use crate::encoder::{resolve_backend, LanguageBackend};
use crate::error::{Error, Result};
use crate::prompting::{PromptOptions, PromptTemplate, PromptTuned, SOFT_PROMPT_PARAM};
use crate::training::{build_param_groups, ClassifierHead, HeadConfig, TrainConfig, TrainOutcome};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HEAD_FILE: &str = "head.safetensors";
pub const PROMPT_FILE: &str = "prompt.safetensors";
pub const BACKBONE_FILE: &str = "backbone.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Finetune,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngManifest {
    pub algorithm: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub backend_id: String,
    pub taxonomy_fingerprint: String,
    pub code_version: String,
    pub train: TrainConfig,
    pub head: Option<HeadConfig>,
    pub template: Option<PromptTemplate>,
    pub prompt: Option<PromptOptions>,
    pub rng: RngManifest,
    pub steps: usize,
    /// Backbone parameter prefixes that training updated.
    pub backbone_prefixes: Vec<String>,
    /// Hash of the full backbone after training.
    pub backbone_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub head: Option<ClassifierHead>,
    pub soft_prompt: Option<Tensor>,
    /// Updated backbone tensors, by parameter name.
    pub backbone: Vec<(String, Tensor)>,
}

fn manifest_base(
    kind: CheckpointKind,
    backend: &dyn LanguageBackend,
    taxonomy: &ValueTaxonomy,
    config: &TrainConfig,
    steps: usize,
) -> Result<Manifest> {
    Ok(Manifest {
        kind,
        backend_id: backend.id().to_owned(),
        taxonomy_fingerprint: taxonomy.fingerprint(),
        code_version: env!("CARGO_PKG_VERSION").to_owned(),
        train: config.clone(),
        head: None,
        template: None,
        prompt: None,
        rng: RngManifest {
            algorithm: "chacha8".into(),
            seed: config.seed,
        },
        steps,
        backbone_prefixes: Vec::new(),
        backbone_hash: backend.params().hash()?,
    })
}

impl Checkpoint {
    /// Captures a fine-tuned head and the encoder layers it trained.
    pub fn finetuned(
        backend: &dyn LanguageBackend,
        taxonomy: &ValueTaxonomy,
        config: &TrainConfig,
        outcome: &TrainOutcome,
    ) -> Result<Self> {
        let mut manifest = manifest_base(
            CheckpointKind::Finetune,
            backend,
            taxonomy,
            config,
            outcome.history.losses(crate::training::Phase::Finetune).len(),
        )?;
        manifest.head = Some(outcome.head.config().clone());
        manifest.backbone_prefixes =
            build_param_groups(backend, config.lr, config.lr_decay, config.trainable_top_layers)?
                .into_iter()
                .filter(|g| g.name != "heads" && g.lr > 0.0)
                .flat_map(|g| g.prefixes)
                .collect();
        let backbone = backend
            .params()
            .iter()
            .filter(|(name, _)| manifest.backbone_prefixes.iter().any(|p| name.starts_with(p.as_str())))
            .map(|(name, var)| (name.to_owned(), var.as_tensor().detach()))
            .collect();
        Ok(Checkpoint {
            manifest,
            head: Some(outcome.head.clone()),
            soft_prompt: None,
            backbone,
        })
    }

    /// Captures tuned prompt parameters; the backbone is left as resolved.
    pub fn prompt_tuned(
        backend: &dyn LanguageBackend,
        taxonomy: &ValueTaxonomy,
        config: &TrainConfig,
        options: &PromptOptions,
        tuned: &PromptTuned,
    ) -> Result<Self> {
        let steps = tuned.history.records.iter().filter(|r| r.loss.is_some()).count();
        let mut manifest = manifest_base(CheckpointKind::Prompt, backend, taxonomy, config, steps)?;
        manifest.head = tuned.head.as_ref().map(|h| h.config().clone());
        manifest.template = Some(tuned.template.clone());
        manifest.prompt = Some(options.clone());
        Ok(Checkpoint {
            manifest,
            head: tuned.head.clone(),
            soft_prompt: tuned.soft_prompt.clone(),
            backbone: Vec::new(),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        if let Some(head) = &self.head {
            head.params().save(dir.join(HEAD_FILE))?;
        }
        if let Some(prompt) = &self.soft_prompt {
            let map = HashMap::from([(SOFT_PROMPT_PARAM.to_owned(), prompt.clone())]);
            candle_core::safetensors::save(&map, dir.join(PROMPT_FILE))?;
        }
        if !self.backbone.is_empty() {
            let map: HashMap<String, Tensor> = self.backbone.iter().cloned().collect();
            candle_core::safetensors::save(&map, dir.join(BACKBONE_FILE))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let head = match &manifest.head {
            Some(config) => {
                let head = ClassifierHead::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0), device)?;
                head.params().load_into(dir.join(HEAD_FILE), device)?;
                Some(head)
            }
            None => None,
        };
        let prompt_path = dir.join(PROMPT_FILE);
        let soft_prompt =
            if prompt_path.exists() {
                let mut map = candle_core::safetensors::load(&prompt_path, device)?;
                Some(map.remove(SOFT_PROMPT_PARAM).ok_or_else(|| {
                    Error::Integrity(format!("{} lacks `{SOFT_PROMPT_PARAM}`", prompt_path.display()))
                })?)
            } else {
                None
            };
        let backbone_path = dir.join(BACKBONE_FILE);
        let mut backbone: Vec<(String, Tensor)> = if backbone_path.exists() {
            candle_core::safetensors::load(&backbone_path, device)?
                .into_iter()
                .collect()
        } else {
            Vec::new()
        };
        backbone.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint {
            manifest,
            head,
            soft_prompt,
            backbone,
        })
    }

    /// Refuses a taxonomy other than the one the checkpoint was trained on.
    pub fn check_taxonomy(&self, taxonomy: &ValueTaxonomy) -> Result<()> {
        let found = taxonomy.fingerprint();
        if found != self.manifest.taxonomy_fingerprint {
            return Err(Error::Integrity(format!(
                "checkpoint was trained on taxonomy {}, configuration uses {found}",
                self.manifest.taxonomy_fingerprint
            )));
        }
        Ok(())
    }

    /// Resolves the backend and applies the saved backbone tensors, verifying the hash.
    pub fn restore_backend(&self) -> Result<Box<dyn LanguageBackend>> {
        let backend = resolve_backend(&self.manifest.backend_id)?;
        for (name, tensor) in &self.backbone {
            backend.params().assign(name, tensor)?;
        }
        let hash = backend.params().hash()?;
        if hash != self.manifest.backbone_hash {
            return Err(Error::Integrity(format!(
                "restored backbone hash {hash} differs from checkpoint {}",
                self.manifest.backbone_hash
            )));
        }
        Ok(backend)
    }
}

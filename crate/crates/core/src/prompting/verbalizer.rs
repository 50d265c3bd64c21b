use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::assets;
use crate::corpus::ValueTaxonomy;
use crate::encoder::LanguageBackend;
use crate::error::{Error, Result};

/// Words that cancel a following match in [`parse_open_answer`].
pub const NEGATIONS: [&str; 3] = ["not", "no", "never"];
/// How many preceding words the negation guard inspects.
pub const NEGATION_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl Aggregation {
    fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Max => values.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerbalizerCategory {
    pub name: String,
    /// Synonyms that signal the category in open answers.
    pub words: Vec<String>,
    /// Rewritten description offered to knowledge-aware templates.
    #[serde(default)]
    pub knowledge: Option<String>,
}

/// Maps model outputs to labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verbalizer {
    pub yes_words: Vec<String>,
    pub no_words: Vec<String>,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(rename = "category")]
    pub categories: Vec<VerbalizerCategory>,
}

impl Verbalizer {
    pub fn builtin() -> Result<Self> {
        Self::from_toml_str(assets::VERBALIZER_TOML)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let v: Verbalizer = toml::from_str(text)?;
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.yes_words.is_empty() || self.no_words.is_empty() {
            return Err(Error::contract("verbalizer needs yes-words and no-words"));
        }
        let all = self.yes_words.iter().chain(&self.no_words);
        if all.clone().any(|w| words(w).is_empty()) {
            return Err(Error::contract("verbalizer answer words must not be blank"));
        }
        if let Some(w) = self
            .yes_words
            .iter()
            .find(|w| self.no_words.iter().any(|n| n.eq_ignore_ascii_case(w)))
        {
            return Err(Error::contract(format!("`{w}` is both a yes-word and a no-word")));
        }
        for c in &self.categories {
            if c.words.is_empty() || c.words.iter().any(|w| words(w).is_empty()) {
                return Err(Error::contract(format!("category `{}` has an empty word set", c.name)));
            }
        }
        Ok(())
    }

    /// Fails unless every taxonomy category has a word set.
    pub fn check_covers(&self, taxonomy: &ValueTaxonomy) -> Result<()> {
        for name in taxonomy.names() {
            self.category(name)?;
        }
        Ok(())
    }

    pub fn category(&self, name: &str) -> Result<&VerbalizerCategory> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::contract(format!("verbalizer has no words for `{name}`")))
    }

    pub fn knowledge(&self, name: &str) -> Option<&str> {
        self.category(name).ok().and_then(|c| c.knowledge.as_deref())
    }

    /// Vocabulary ids of the first token of each yes- and no-word.
    pub fn project(&self, backend: &dyn LanguageBackend) -> Result<AnswerTokens> {
        let first = |w: &String| {
            backend
                .tokenize(w)
                .first()
                .copied()
                .ok_or_else(|| Error::contract(format!("answer word `{w}` has no tokens")))
        };
        let yes = self.yes_words.iter().map(first).collect::<Result<Vec<_>>>()?;
        let no = self.no_words.iter().map(first).collect::<Result<Vec<_>>>()?;
        if let Some(t) = yes.iter().find(|t| no.contains(t)) {
            return Err(Error::contract(format!("yes- and no-words share first token {t}")));
        }
        Ok(AnswerTokens {
            yes,
            no,
            aggregation: self.aggregation,
        })
    }
}

/// Yes/no word sets projected onto a backend vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerTokens {
    pub yes: Vec<u32>,
    pub no: Vec<u32>,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskScore {
    pub probability: f64,
    /// Set when neither word set received any mass.
    pub low_confidence: bool,
}

/// `p_yes / (p_yes + p_no)` over one mask-position distribution.
pub fn score_binary_mask(distribution: &[f64], tokens: &AnswerTokens) -> Result<MaskScore> {
    let mass = |ids: &[u32]| {
        ids.iter()
            .map(|&i| {
                distribution
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("token {i} outside distribution of {}", distribution.len())))
            })
            .collect::<Result<Vec<f64>>>()
            .map(|v| tokens.aggregation.apply(&v))
    };
    let (yes, no) = (mass(&tokens.yes)?, mass(&tokens.no)?);
    if yes + no <= 0.0 {
        return Ok(MaskScore {
            probability: 0.5,
            low_confidence: true,
        });
    }
    Ok(MaskScore {
        probability: yes / (yes + no),
        low_confidence: false,
    })
}

/// Log-odds `log p_yes - log p_no` of [`score_binary_mask`] from `B x V` logits, shape `B`.
///
/// The softmax normaliser cancels, so only the answer-token logits are needed.
pub fn binary_mask_logit(logits: &Tensor, tokens: &AnswerTokens) -> Result<Tensor> {
    let logits = logits.to_dtype(DType::F32)?;
    let log_mass = |ids: &[u32]| -> Result<Tensor> {
        let index = Tensor::new(ids, logits.device())?;
        let picked = logits.index_select(&index, 1)?;
        Ok(match tokens.aggregation {
            Aggregation::Mean => {
                let m = picked.max_keepdim(1)?.detach();
                let lse = (picked.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + m)?;
                (lse.squeeze(1)? - (ids.len() as f64).ln())?
            }
            Aggregation::Max => picked.max(1)?,
        })
    };
    Ok((log_mass(&tokens.yes)? - log_mass(&tokens.no)?)?)
}

/// Lowercase alphanumeric words (apostrophes and hyphens kept inside words).
pub(crate) fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .map(|w| w.trim_matches(|c| c == '\'' || c == '-').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// First yes-word or no-word in `text` decides; case-insensitive, whole words.
pub fn parse_binary_answer(text: &str, verbalizer: &Verbalizer) -> Result<bool> {
    let yes: Vec<Vec<String>> = verbalizer.yes_words.iter().map(|w| words(w)).collect();
    let no: Vec<Vec<String>> = verbalizer.no_words.iter().map(|w| words(w)).collect();
    let tokens = words(text);
    for i in 0..tokens.len() {
        let at = |phrase: &Vec<String>| tokens[i..].starts_with(phrase);
        if yes.iter().any(at) {
            return Ok(true);
        }
        if no.iter().any(at) {
            return Ok(false);
        }
    }
    Err(Error::Undecided(text.to_owned()))
}

/// True iff a synonym of `category` or a yes-word occurs without a negation
/// among the preceding [`NEGATION_WINDOW`] words. Blank text is undecided.
pub fn parse_open_answer(text: &str, verbalizer: &Verbalizer, category: &str) -> Result<bool> {
    let tokens = words(text);
    if tokens.is_empty() {
        return Err(Error::Undecided(text.to_owned()));
    }
    let phrases: Vec<Vec<String>> = verbalizer
        .category(category)?
        .words
        .iter()
        .chain(&verbalizer.yes_words)
        .map(|w| words(w))
        .collect();
    for i in 0..tokens.len() {
        if !phrases.iter().any(|p| tokens[i..].starts_with(p)) {
            continue;
        }
        let negated = tokens[i.saturating_sub(NEGATION_WINDOW)..i]
            .iter()
            .any(|t| NEGATIONS.contains(&t.as_str()));
        if !negated {
            return Ok(true);
        }
    }
    Ok(false)
}
